use serde::{Deserialize, Serialize};

use super::{ClusterModel, IvrError};
use crate::audio::{AudioClip, StereoCall};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvrDecision {
    pub boundary_window: Option<usize>,
    pub boundary_s: Option<f64>,
    pub ivr_cluster: usize,
    pub trimmed: bool,
}

impl IvrDecision {
    pub fn untrimmed(ivr_cluster: usize) -> Self {
        Self {
            boundary_window: None,
            boundary_s: None,
            ivr_cluster,
            trimmed: false,
        }
    }
}

/// Audit line persisted per call by the IVR stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvrDecisionRecord {
    pub call_id: String,
    pub boundary_s: Option<f64>,
    pub trimmed: bool,
    pub ivr_cluster: usize,
    pub inertia: f64,
}

/// Labels the IVR cluster by majority over the first `head_windows`
/// assignments (ties go to cluster 0) and returns the first window that
/// starts a run of `consec_m` non-IVR windows.
pub fn detect_ivr_boundary(
    model: &ClusterModel,
    hop_s: f64,
    head_windows: usize,
    consec_m: usize,
) -> Result<IvrDecision, IvrError> {
    if model.k() != 2 {
        return Err(IvrError::WrongK(model.k()));
    }
    scan_assignments(&model.assignments, hop_s, head_windows, consec_m)
}

/// Boundary scan over a bare assignment sequence (cluster ids 0 and 1).
pub fn scan_assignments(
    assignments: &[usize],
    hop_s: f64,
    head_windows: usize,
    consec_m: usize,
) -> Result<IvrDecision, IvrError> {
    if assignments.is_empty() {
        return Err(IvrError::NoAssignments);
    }
    let consec_m = consec_m.max(1);
    let head = &assignments[..head_windows.clamp(1, assignments.len())];
    let ones = head.iter().filter(|&&c| c == 1).count();
    let ivr_cluster = usize::from(ones > head.len() - ones);

    let mut run = 0;
    for (i, &c) in assignments.iter().enumerate() {
        if c == ivr_cluster {
            run = 0;
            continue;
        }
        run += 1;
        if run == consec_m {
            let t = i + 1 - consec_m;
            return Ok(IvrDecision {
                boundary_window: Some(t),
                boundary_s: Some(t as f64 * hop_s),
                ivr_cluster,
                // t = 0: the call opens with conversation, nothing to cut
                trimmed: t > 0,
            });
        }
    }
    Ok(IvrDecision::untrimmed(ivr_cluster))
}

#[derive(Debug, Clone)]
pub struct TrimOutcome {
    pub call: StereoCall,
    pub warnings: Vec<String>,
}

fn drop_head(clip: &AudioClip, n: usize) -> AudioClip {
    AudioClip::new(clip.samples[n..].to_vec(), clip.sample_rate_hz, clip.channel)
}

/// Cuts both channels at the decision boundary so they stay aligned.
pub fn trim_ivr(call: &StereoCall, decision: &IvrDecision) -> Result<TrimOutcome, IvrError> {
    let Some(boundary_s) = decision.boundary_s else {
        let msg = format!("{}: no IVR transition found, call left untrimmed", call.call_id);
        log::warn!("{msg}");
        return Ok(TrimOutcome {
            call: call.clone(),
            warnings: vec![msg],
        });
    };
    let rate = call.agent.sample_rate_hz as f64;
    let cut = (boundary_s * rate).round() as usize;
    let shortest = call.agent.samples.len().min(call.customer.samples.len());
    if cut > shortest {
        return Err(IvrError::BoundaryBeyondClip {
            boundary_s,
            duration_s: shortest as f64 / rate,
        });
    }
    Ok(TrimOutcome {
        call: StereoCall {
            call_id: call.call_id.clone(),
            agent: drop_head(&call.agent, cut),
            customer: drop_head(&call.customer, cut),
        },
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::ChannelLabel;
    use proptest::prelude::*;

    fn seq(parts: &[(usize, usize)]) -> Vec<usize> {
        parts.iter().flat_map(|&(c, n)| std::iter::repeat_n(c, n)).collect()
    }

    #[test]
    fn single_cluster_call_has_no_boundary() {
        let d = scan_assignments(&[0; 30], 0.5, 10, 5).unwrap();
        assert_eq!(d, IvrDecision::untrimmed(0));
    }

    #[test]
    fn clean_transition() {
        let d = scan_assignments(&seq(&[(0, 20), (1, 30)]), 0.5, 10, 5).unwrap();
        assert_eq!(d.ivr_cluster, 0);
        assert_eq!(d.boundary_window, Some(20));
        assert_eq!(d.boundary_s, Some(10.0));
        assert!(d.trimmed);
    }

    #[test]
    fn brief_flips_are_ignored() {
        let mut a = vec![0, 1, 0, 1, 0];
        a.extend([1; 10]);
        let d = scan_assignments(&a, 0.5, 5, 5).unwrap();
        assert_eq!(d.ivr_cluster, 0);
        assert_eq!(d.boundary_window, Some(5));
    }

    #[test]
    fn head_tie_goes_to_cluster_zero() {
        let d = scan_assignments(&seq(&[(1, 5), (0, 5), (1, 10)]), 0.5, 10, 5).unwrap();
        assert_eq!(d.ivr_cluster, 0);
        assert_eq!(d.boundary_window, Some(0));
        assert!(!d.trimmed);
    }

    fn call(secs: usize, rate: u32) -> StereoCall {
        let n = secs * rate as usize;
        StereoCall {
            call_id: "c1".into(),
            agent: AudioClip::new(
                (0..n).map(|i| (i % 100) as f32 / 100.0).collect(),
                rate,
                ChannelLabel::Agent,
            ),
            customer: AudioClip::new(vec![0.25; n], rate, ChannelLabel::Customer),
        }
    }

    #[test]
    fn trim_arithmetic_and_identity() {
        let c = call(60, 16_000);
        let out = trim_ivr(&c, &IvrDecision::untrimmed(0)).unwrap();
        assert_eq!(out.call, c);
        assert_eq!(out.warnings.len(), 1);

        let decision = scan_assignments(&seq(&[(0, 20), (1, 100)]), 0.5, 10, 5).unwrap();
        let out = trim_ivr(&c, &decision).unwrap();
        assert_eq!(c.agent.samples.len() - out.call.agent.samples.len(), 160_000);
        assert_eq!(c.customer.samples.len() - out.call.customer.samples.len(), 160_000);
        assert_eq!(out.call.agent.samples[..], c.agent.samples[160_000..]);

        let far = IvrDecision {
            boundary_window: Some(200),
            boundary_s: Some(100.0),
            ivr_cluster: 0,
            trimmed: true,
        };
        assert!(matches!(trim_ivr(&c, &far), Err(IvrError::BoundaryBeyondClip { .. })));
    }

    proptest! {
        #[test]
        fn boundary_is_first_qualifying_run(
            a in prop::collection::vec(0usize..2, 1..80),
            head in 1usize..15,
            m in 1usize..8,
        ) {
            let d = scan_assignments(&a, 0.5, head, m).unwrap();
            let ivr = d.ivr_cluster;
            let qualifies = |t: usize| t + m <= a.len() && a[t..t + m].iter().all(|&c| c != ivr);
            let expected = (0..a.len()).find(|&t| qualifies(t));
            prop_assert_eq!(d.boundary_window, expected);
            prop_assert_eq!(d.boundary_s, expected.map(|t| t as f64 * 0.5));
        }
    }
}
