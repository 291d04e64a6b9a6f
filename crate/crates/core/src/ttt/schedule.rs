//! Ordering of test-time update steps for each strategy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    /// Reset to the pretrained weights for every frame.
    TttN,
    /// Each frame starts from the weights adapted on the previous frame.
    TttMwi,
    /// One step per frame per pass, several passes over the whole video.
    TttLtv,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::TttN, Strategy::TttMwi, Strategy::TttLtv];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::TttN => "ttt_n",
            Strategy::TttMwi => "ttt_mwi",
            Strategy::TttLtv => "ttt_ltv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::validation("ttt.strategy", format!("unknown strategy `{s}`; valid: none, ttt_n, ttt_mwi, ttt_ltv")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    /// Reload the pretrained weights (and reset optimizer state) before the step.
    Pretrained,
    /// Continue from the current weights.
    Carry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub frame: usize,
    pub init: InitSource,
    /// Index of this step among the consecutive steps on the same frame.
    pub frame_epoch: usize,
    /// Index of the pass over the video this step belongs to.
    pub video_pass: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTTSchedule {
    pub strategy: Strategy,
    pub epochs: usize,
    pub steps: Vec<ScheduleStep>,
    /// Frames visited, in order of first visit.
    pub frames: Vec<usize>,
    pub warnings: Vec<String>,
}

impl TTTSchedule {
    /// Number of times the pretrained weights are (re)loaded.
    pub fn reloads(&self) -> usize {
        self.steps.iter().filter(|s| s.init == InitSource::Pretrained).count()
    }
}

/// Clip `k` holds frames `k, k+n, k+2n, ...`; one frame is drawn per clip
/// and the draws are returned in temporal order.
fn sample_clips<R: Rng + ?Sized>(t: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let mut frames: Vec<usize> = (0..n)
        .map(|k| {
            let size = (t - k).div_ceil(n);
            k + n * rng.random_range(0..size)
        })
        .collect();
    frames.sort_unstable();
    frames
}

/// Builds the step order for a video of `t` frames. `clips` enables clip
/// sampling with that many interleaved clips.
pub fn build_schedule<R: Rng + ?Sized>(
    t: usize,
    strategy: Strategy,
    epochs: usize,
    clips: Option<usize>,
    rng: &mut R,
) -> Result<TTTSchedule> {
    if t == 0 {
        return Err(Error::validation("video", "cannot schedule an empty video"));
    }
    let mut warnings = Vec::new();
    let clips = match clips {
        Some(0) => return Err(Error::validation("ttt.clips", "must be positive")),
        Some(n) if n > t => {
            warnings.push(format!("{n} clips requested for {t} frames; using {t}"));
            Some(t)
        }
        other => other,
    };
    let pick = |rng: &mut R| match clips {
        Some(n) => sample_clips(t, n, rng),
        None => (0..t).collect(),
    };
    let mut steps = Vec::new();
    let mut frames = Vec::new();
    match strategy {
        Strategy::None => {}
        Strategy::TttN | Strategy::TttMwi => {
            frames = pick(rng);
            for (i, &f) in frames.iter().enumerate() {
                for e in 0..epochs {
                    let fresh = e == 0 && (strategy == Strategy::TttN || i == 0);
                    let init = if fresh { InitSource::Pretrained } else { InitSource::Carry };
                    steps.push(ScheduleStep { frame: f, init, frame_epoch: e, video_pass: 0 });
                }
            }
        }
        Strategy::TttLtv => {
            for e in 0..epochs {
                let order = pick(rng);
                for &f in &order {
                    let init = if steps.is_empty() { InitSource::Pretrained } else { InitSource::Carry };
                    steps.push(ScheduleStep { frame: f, init, frame_epoch: 0, video_pass: e });
                    if !frames.contains(&f) {
                        frames.push(f);
                    }
                }
            }
        }
    }
    Ok(TTTSchedule { strategy, epochs, steps, frames, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use InitSource::{Carry as C, Pretrained as P};

    fn pairs(s: &TTTSchedule) -> Vec<(usize, InitSource)> {
        s.steps.iter().map(|s| (s.frame, s.init)).collect()
    }

    #[test]
    fn loop_through_video() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = build_schedule(3, Strategy::TttLtv, 2, None, &mut rng).unwrap();
        assert_eq!(pairs(&s), vec![(0, P), (1, C), (2, C), (0, C), (1, C), (2, C)]);
    }

    #[test]
    fn naive_resets_every_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = build_schedule(2, Strategy::TttN, 2, None, &mut rng).unwrap();
        assert_eq!(pairs(&s), vec![(0, P), (0, C), (1, P), (1, C)]);
        let m = build_schedule(2, Strategy::TttMwi, 2, None, &mut rng).unwrap();
        assert_eq!(pairs(&m), vec![(0, P), (0, C), (1, C), (1, C)]);
    }

    #[test]
    fn ten_clips_over_a_hundred_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = build_schedule(100, Strategy::TttLtv, 1, Some(10), &mut rng).unwrap();
        assert_eq!(s.steps.len(), 10);
        let mut residues: Vec<usize> = s.steps.iter().map(|s| s.frame % 10).collect();
        residues.sort();
        assert_eq!(residues, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_clips_are_clamped_with_a_warning() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = build_schedule(4, Strategy::TttLtv, 2, Some(10), &mut rng).unwrap();
        assert_eq!(s.steps.len(), 8);
        assert_eq!(s.warnings.len(), 1);
        assert!(build_schedule(0, Strategy::TttN, 1, None, &mut rng).is_err());
    }
}
