//! Capture-timing math: clock offsets between the depth cameras, the
//! workstation and the phone, nearest-frame matching between the two
//! streams, and the interference-free exposure schedule for a daisy chain
//! of time-of-flight sensors.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("round-trip time must be non-negative, got {0} s")]
    NegativeRoundTrip(f64),
    #[error("{requested} devices requested but at most {max} fit between exposures")]
    CapacityExceeded { requested: usize, max: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Offsets in seconds; adding one converts a time on the first clock into
/// the second (`t_W = t_K + k_to_w`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClockOffsets {
    /// Depth camera to workstation.
    pub k_to_w: f64,
    /// Workstation to phone system clock.
    pub w_to_i: f64,
    /// Phone system clock to its AR session clock.
    pub i_to_a: f64,
}

impl ClockOffsets {
    pub fn new(k_to_w: f64, w_to_i: f64, i_to_a: f64) -> Result<Self, SyncError> {
        if ![k_to_w, w_to_i, i_to_a].iter().all(|v| v.is_finite()) {
            return Err(SyncError::InvalidInput("offsets must be finite".into()));
        }
        Ok(Self { k_to_w, w_to_i, i_to_a })
    }
}

/// Offset of the remote clock from a single request: the remote stamp minus
/// the local send time, less half the round trip.
pub fn offset_round_trip(t_w_send: f64, t_i_recv: f64, t_round: f64) -> Result<f64, SyncError> {
    if t_round.is_nan() || t_round < 0.0 {
        return Err(SyncError::NegativeRoundTrip(t_round));
    }
    if !t_w_send.is_finite() || !t_i_recv.is_finite() || !t_round.is_finite() {
        return Err(SyncError::InvalidInput("timestamps must be finite".into()));
    }
    Ok(t_i_recv - t_w_send - t_round / 2.0)
}

/// Depth camera to AR clock: `k_to_w + w_to_i + i_to_a`.
pub fn compose_offsets(offsets: &ClockOffsets) -> f64 {
    offsets.k_to_w + offsets.w_to_i + offsets.i_to_a
}

/// Maximum tolerated skew when pairing frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncConfig {
    /// Seconds; a pair is rejected when the skew reaches this value.
    pub max_skew: f64,
}

impl SyncConfig {
    /// Rejects at one depth-camera frame period (33 ms).
    pub const fn frame_period() -> Self {
        Self { max_skew: 0.033 }
    }

    /// Half a 30 Hz phone period (16.7 ms).
    pub const fn half_phone_period() -> Self {
        Self { max_skew: 0.0167 }
    }
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self::frame_period()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramePair {
    pub kinect: usize,
    pub iphone: usize,
    /// `iphone_ts - (kinect_ts + offset)`, seconds.
    pub skew: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameMapping {
    pub pairs: Vec<FramePair>,
    /// Depth frames with no phone frame closer than the skew limit.
    pub rejected: Vec<usize>,
}

fn check_sorted(ts: &[f64], name: &str) -> Result<(), SyncError> {
    if ts.iter().any(|t| !t.is_finite()) {
        return Err(SyncError::InvalidInput(format!("{name} timestamps must be finite")));
    }
    if ts.windows(2).any(|w| w[1] < w[0]) {
        return Err(SyncError::InvalidInput(format!("{name} timestamps must be sorted ascending")));
    }
    Ok(())
}

/// Pairs each depth frame with the phone frame closest to
/// `kinect_ts + offset_k_to_a`. Pairs with `|skew| >= max_skew` are rejected;
/// equal distances go to the earlier phone frame.
pub fn map_frames(kinect_ts: &[f64], iphone_ts: &[f64], offset_k_to_a: f64, max_skew: f64) -> Result<FrameMapping, SyncError> {
    check_sorted(kinect_ts, "kinect")?;
    check_sorted(iphone_ts, "iphone")?;
    if !offset_k_to_a.is_finite() || max_skew.is_nan() {
        return Err(SyncError::InvalidInput("offset must be finite and max_skew a number".into()));
    }
    let mut out = FrameMapping::default();
    for (k, &t) in kinect_ts.iter().enumerate() {
        let target = t + offset_k_to_a;
        let after = iphone_ts.partition_point(|&s| s < target);
        let best = [after.checked_sub(1), (after < iphone_ts.len()).then_some(after)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (iphone_ts[a] - target).abs().total_cmp(&(iphone_ts[b] - target).abs()).then(a.cmp(&b)));
        match best {
            Some(i) if (iphone_ts[i] - target).abs() < max_skew => out.pairs.push(FramePair { kinect: k, iphone: i, skew: iphone_ts[i] - target }),
            _ => out.rejected.push(k),
        }
    }
    Ok(out)
}

/// Exposure timing of one time-of-flight sensor, in whole microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureParams {
    pub pulse_us: u64,
    /// Gap between the end of one pulse and the start of the next.
    pub idle_us: u64,
    pub exposures_per_frame: usize,
}

impl ExposureParams {
    pub fn new(pulse_us: u64, idle_us: u64, exposures_per_frame: usize) -> Result<Self, SyncError> {
        if pulse_us == 0 || exposures_per_frame == 0 {
            return Err(SyncError::InvalidInput("need pulse_us > 0 and at least one exposure".into()));
        }
        Ok(Self { pulse_us, idle_us, exposures_per_frame })
    }

    /// Nine 160 µs pulses 1450 µs apart.
    pub const fn azure_kinect() -> Self {
        Self { pulse_us: 160, idle_us: 1450, exposures_per_frame: 9 }
    }
}

impl Default for ExposureParams {
    fn default() -> Self {
        Self::azure_kinect()
    }
}

/// The master plus one device per whole pulse that fits in the idle gap.
pub fn max_sync_devices(params: &ExposureParams) -> usize {
    (params.idle_us / params.pulse_us) as usize + 1
}

/// Half-open `[start, end)` pulse windows (µs) for every device and exposure
/// in one frame, device-major.
pub fn exposure_intervals(delays_us: &[u64], params: &ExposureParams) -> Vec<(u64, u64)> {
    let spacing = params.pulse_us + params.idle_us;
    delays_us
        .iter()
        .flat_map(|&d| (0..params.exposures_per_frame as u64).map(move |j| (d + j * spacing, d + j * spacing + params.pulse_us)))
        .collect()
}

/// Whether any two half-open windows intersect, checked over every pair.
pub fn any_overlap(intervals: &[(u64, u64)]) -> bool {
    intervals.iter().enumerate().any(|(i, a)| intervals[i + 1..].iter().any(|b| a.0 < b.1 && b.0 < a.1))
}

/// Delay of each device after the master: device `k` fires `k` pulse widths
/// late. The schedule must fit inside one frame period.
pub fn schedule_exposures(n_devices: usize, params: &ExposureParams, frame_period_us: u64) -> Result<Vec<u64>, SyncError> {
    ExposureParams::new(params.pulse_us, params.idle_us, params.exposures_per_frame)?;
    let max = max_sync_devices(params);
    if n_devices > max {
        return Err(SyncError::CapacityExceeded { requested: n_devices, max });
    }
    let delays: Vec<u64> = (0..n_devices as u64).map(|k| k * params.pulse_us).collect();
    let end = exposure_intervals(&delays, params).iter().map(|iv| iv.1).max().unwrap_or(0);
    if end > frame_period_us {
        return Err(SyncError::InvalidInput(format!("exposures end at {end} µs, past the {frame_period_us} µs frame period")));
    }
    debug_assert!(!any_overlap(&exposure_intervals(&delays, params)));
    Ok(delays)
}

/// Remote clock reading `local + offset`, reached over a link with the given
/// base one-way delay. Outbound legs vary uniformly by up to `jitter`
/// seconds (never below zero); the return leg is always the base delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulatedLink {
    pub offset: f64,
    pub delay: f64,
    pub jitter: f64,
}

impl SimulatedLink {
    /// One request sent at local time `t_send`: returns the local send time,
    /// the remote receive stamp and the measured round trip.
    pub fn exchange<R: Rng + ?Sized>(&self, t_send: f64, rng: &mut R) -> (f64, f64, f64) {
        let out = (self.delay + if self.jitter > 0.0 { rng.random_range(-self.jitter..=self.jitter) } else { 0.0 }).max(0.0);
        let t_recv = t_send + out + self.offset;
        (t_send, t_recv, out + self.delay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn round_trip_examples() {
        assert_eq!(offset_round_trip(100.0, 100.0, 0.0).unwrap(), 0.0);
        assert_eq!(offset_round_trip(100.0, 250.0, 20.0).unwrap(), 140.0);
        assert_eq!(offset_round_trip(0.0, 0.0, -1.0), Err(SyncError::NegativeRoundTrip(-1.0)));
    }

    #[test]
    fn composition_is_a_sum() {
        assert_eq!(compose_offsets(&ClockOffsets::default()), 0.0);
        let o = ClockOffsets::new(1.5, -0.25, 0.05).unwrap();
        assert!((compose_offsets(&o) - 1.3).abs() < 1e-15);
        let perms = [(o.k_to_w, o.w_to_i, o.i_to_a), (o.i_to_a, o.k_to_w, o.w_to_i), (o.w_to_i, o.i_to_a, o.k_to_w)];
        for (a, b, c) in perms {
            assert!((a + b + c - compose_offsets(&o)).abs() < 1e-15);
        }
        assert!(ClockOffsets::new(f64::NAN, 0.0, 0.0).is_err());
    }

    fn stream(n: usize, hz: f64, start: f64) -> Vec<f64> {
        (0..n).map(|i| start + i as f64 / hz).collect()
    }

    #[test]
    fn aligned_streams_map_exactly() {
        let k = stream(30, 30.0, 0.0);
        let i = stream(60, 60.0, 0.0);
        let m = map_frames(&k, &i, 0.0, 0.033).unwrap();
        assert!(m.rejected.is_empty());
        for p in &m.pairs {
            assert_eq!(p.iphone, 2 * p.kinect);
            assert!(p.skew.abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_period_offset_stays_within_bound() {
        let k = stream(30, 30.0, 0.0);
        let i = stream(70, 60.0, 0.0);
        let m = map_frames(&k, &i, 1.0 / 240.0, 0.033).unwrap();
        assert_eq!(m.pairs.len(), 30);
        for p in &m.pairs {
            // brute-force nearest
            let target = k[p.kinect] + 1.0 / 240.0;
            let best = (0..i.len()).min_by(|&a, &b| (i[a] - target).abs().total_cmp(&(i[b] - target).abs())).unwrap();
            assert_eq!(p.iphone, best);
            assert!(p.skew.abs() <= 1.0 / 240.0 + 1e-12);
        }
    }

    #[test]
    fn frame_in_a_gap_is_rejected() {
        let i = [0.0, 0.1];
        let m = map_frames(&[0.05], &i, 0.0, 0.033).unwrap();
        assert_eq!(m.rejected, vec![0]);
        assert!(m.pairs.is_empty());
    }

    #[test]
    fn boundary_skew_is_rejected() {
        let m = map_frames(&[1.0], &[1.125], 0.0, 0.125).unwrap();
        assert_eq!(m.rejected, vec![0]);
        let m = map_frames(&[1.0], &[1.125], 0.0, 0.126).unwrap();
        assert_eq!(m.pairs.len(), 1);
    }

    #[test]
    fn ties_go_to_the_earlier_frame() {
        let m = map_frames(&[0.5], &[0.25, 0.75], 0.0, 1.0).unwrap();
        assert_eq!(m.pairs[0].iphone, 0);
    }

    #[test]
    fn empty_and_unsorted_inputs() {
        assert_eq!(map_frames(&[], &[1.0], 0.0, 0.033).unwrap(), FrameMapping::default());
        assert_eq!(map_frames(&[1.0], &[], 0.0, 0.033).unwrap().rejected, vec![0]);
        assert!(map_frames(&[2.0, 1.0], &[], 0.0, 0.033).is_err());
    }

    #[test]
    fn device_capacity() {
        let p = |pulse, idle| ExposureParams::new(pulse, idle, 9).unwrap();
        assert_eq!(max_sync_devices(&p(160, 1450)), 10);
        assert_eq!(max_sync_devices(&p(160, 159)), 1);
        assert_eq!(max_sync_devices(&p(100, 1000)), 11);
    }

    #[test]
    fn ten_device_schedule_has_no_overlap() {
        let params = ExposureParams::azure_kinect();
        let delays = schedule_exposures(10, &params, 33_333).unwrap();
        let iv = exposure_intervals(&delays, &params);
        assert_eq!(iv.len(), 90);
        assert!(!any_overlap(&iv));
        assert_eq!(schedule_exposures(1, &params, 33_333).unwrap(), vec![0]);
        assert_eq!(schedule_exposures(11, &params, 33_333), Err(SyncError::CapacityExceeded { requested: 11, max: 10 }));
        // one more device past the bound collides with the master's next pulse
        let over: Vec<u64> = (0..11).map(|k| k * 160).collect();
        assert!(any_overlap(&exposure_intervals(&over, &params)));
    }

    #[test]
    fn overlap_check_is_half_open() {
        assert!(!any_overlap(&[(0, 10), (10, 20)]));
        assert!(any_overlap(&[(0, 10), (5, 20)]));
    }

    #[test]
    fn symmetric_link_recovers_offset() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let link = SimulatedLink { offset: 3.25, delay: 0.0078125, jitter: 0.0 };
        let (tw, ti, tr) = link.exchange(1024.0, &mut rng);
        assert_eq!(offset_round_trip(tw, ti, tr).unwrap(), 3.25);
    }

    proptest! {
        #[test]
        fn jittered_link_error_is_bounded(offset in -10.0f64..10.0, delay in 0.01f64..0.05, jitter in 0.0f64..0.01, seed in any::<u64>()) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let link = SimulatedLink { offset, delay, jitter };
            let (tw, ti, tr) = link.exchange(100.0, &mut rng);
            let est = offset_round_trip(tw, ti, tr).unwrap();
            prop_assert!((est - offset).abs() <= jitter / 2.0 + 1e-12);
        }

        #[test]
        fn mapping_is_monotone_and_within_skew(
            k in prop::collection::vec(0.0f64..10.0, 0..40),
            i in prop::collection::vec(0.0f64..10.0, 0..80),
            offset in -0.5f64..0.5,
        ) {
            let (mut k, mut i) = (k, i);
            k.sort_by(f64::total_cmp);
            i.sort_by(f64::total_cmp);
            let m = map_frames(&k, &i, offset, 0.033).unwrap();
            prop_assert_eq!(m.pairs.len() + m.rejected.len(), k.len());
            for p in &m.pairs {
                prop_assert!(p.skew.abs() < 0.033);
            }
            for w in m.pairs.windows(2) {
                prop_assert!(w[0].kinect < w[1].kinect && w[0].iphone <= w[1].iphone);
            }
        }

        #[test]
        fn accepted_schedules_never_overlap(pulse in 10u64..500, idle in 0u64..3000, exposures in 1usize..10, n in 1usize..20) {
            let params = ExposureParams::new(pulse, idle, exposures).unwrap();
            if let Ok(delays) = schedule_exposures(n, &params, 1_000_000) {
                prop_assert!(!any_overlap(&exposure_intervals(&delays, &params)));
            } else {
                prop_assert!(n > max_sync_devices(&params));
            }
        }
    }
}
