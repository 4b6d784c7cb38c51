use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{RngStream, Tensor};

use super::RawSeries;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// 1–3 steps on one channel.
    Spike,
    /// 50–200 steps of constant offset on one channel.
    LevelShift,
    /// 50–200 steps where a coupled channel's dependence on its partner
    /// flips sign.
    CorrelationBreak,
}

/// Parameters of the synthetic generator.
///
/// Channels are noisy mixtures of two sinusoids; odd channels carry a linear
/// coupling to the preceding even channel. `peak_channel` additionally
/// carries sharp periodic bursts that are part of normal behaviour.
/// Anomalies are injected only into the test segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub channels: usize,
    /// Length of the labelled test series.
    pub length: usize,
    /// Length of the anomaly-free training series that precedes it.
    pub train_length: usize,
    pub period_min: f64,
    pub period_max: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub noise_std: f64,
    /// Weight of the partner signal in each coupled channel.
    pub coupling: f64,
    pub peak_channel: Option<usize>,
    pub peak_period: usize,
    pub peak_width: usize,
    /// Burst height in multiples of the channel's base standard deviation.
    pub peak_scale: f64,
    pub anomaly_types: Vec<AnomalyKind>,
    /// Target fraction of labelled test timesteps.
    pub anomaly_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            channels: 8,
            length: 20_000,
            train_length: 10_000,
            period_min: 20.0,
            period_max: 200.0,
            amplitude_min: 0.5,
            amplitude_max: 1.5,
            noise_std: 0.05,
            coupling: 0.8,
            peak_channel: Some(0),
            peak_period: 150,
            peak_width: 5,
            peak_scale: 6.0,
            anomaly_types: vec![
                AnomalyKind::Spike,
                AnomalyKind::LevelShift,
                AnomalyKind::CorrelationBreak,
            ],
            anomaly_rate: 0.01,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Every violated constraint, one message per field.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.channels == 0 {
            p.push("channels: must be at least 1".to_string());
        }
        if self.length == 0 {
            p.push("length: must be positive".to_string());
        }
        if !(self.period_min > 0.0 && self.period_min <= self.period_max) {
            p.push("period_min/period_max: need 0 < period_min <= period_max".to_string());
        }
        if !(self.amplitude_min >= 0.0 && self.amplitude_min <= self.amplitude_max) {
            p.push("amplitude_min/amplitude_max: need 0 <= amplitude_min <= amplitude_max".to_string());
        }
        if !(self.noise_std >= 0.0) {
            p.push("noise_std: must be non-negative".to_string());
        }
        if !self.coupling.is_finite() {
            p.push("coupling: must be finite".to_string());
        }
        if let Some(pc) = self.peak_channel {
            if pc >= self.channels {
                p.push(format!("peak_channel: {pc} out of range for {} channels", self.channels));
            }
            if self.peak_period == 0 || self.peak_width == 0 || self.peak_width > self.peak_period {
                p.push("peak_period/peak_width: need 0 < peak_width <= peak_period".to_string());
            }
            if self.peak_scale < 5.0 {
                p.push("peak_scale: bursts must be at least 5x the base std".to_string());
            }
        }
        if !(0.0..0.5).contains(&self.anomaly_rate) {
            p.push("anomaly_rate: must lie in [0, 0.5)".to_string());
        }
        if self.anomaly_rate > 0.0 {
            if self.anomaly_types.is_empty() {
                p.push("anomaly_types: empty while anomaly_rate > 0".to_string());
            }
            if self.targets().is_empty() {
                p.push("channels: no channel available for anomaly injection".to_string());
            }
            if self.anomaly_types.contains(&AnomalyKind::CorrelationBreak) && self.coupled_pairs().is_empty() {
                p.push("anomaly_types: correlation_break needs at least two channels".to_string());
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    fn partner(&self, c: usize) -> Option<usize> {
        (c % 2 == 1).then(|| c - 1)
    }

    /// `(dependent, source)` channel pairs that share a linear coupling.
    fn coupled_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.channels)
            .filter_map(|c| self.partner(c).map(|s| (c, s)))
            .filter(|&(c, _)| Some(c) != self.peak_channel)
            .collect()
    }

    /// Channels eligible for spike and level-shift injection.
    fn targets(&self) -> Vec<usize> {
        (0..self.channels).filter(|&c| Some(c) != self.peak_channel).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectedAnomaly {
    pub kind: AnomalyKind,
    /// Row offset within the test series.
    pub start: usize,
    pub len: usize,
    pub channel: usize,
}

/// Output of [`synth_generate`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    /// Anomaly-free series, all labels 0.
    pub train: RawSeries,
    /// Continuation of the same process with injected, labelled anomalies.
    pub test: RawSeries,
    pub anomalies: Vec<InjectedAnomaly>,
    /// Test rows that fall inside a normal peak burst.
    pub peak_mask: Vec<bool>,
}

struct Component {
    amp: f64,
    period: f64,
    phase: f64,
}

/// Deterministic synthetic dataset for a given spec and seed.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let c = spec.channels;
    let total = spec.train_length + spec.length;
    let root = RngStream::new(spec.seed, "synth");

    let mut shape_rng = root.derive("shape");
    let comps: Vec<[Component; 2]> = (0..c)
        .map(|_| {
            let mut draw = || Component {
                amp: shape_rng.uniform_range(spec.amplitude_min, spec.amplitude_max),
                period: shape_rng.uniform_range(spec.period_min, spec.period_max),
                phase: shape_rng.uniform_range(0.0, std::f64::consts::TAU),
            };
            [draw(), draw()]
        })
        .collect();
    let base_std: Vec<f64> = comps
        .iter()
        .map(|cs| (cs.iter().map(|k| k.amp * k.amp / 2.0).sum::<f64>()).sqrt())
        .collect();

    let base = |ch: usize, t: usize| -> f64 {
        comps[ch]
            .iter()
            .map(|k| k.amp * (std::f64::consts::TAU * t as f64 / k.period + k.phase).sin())
            .sum()
    };

    let mut noise_rng = root.derive("noise");
    let peak_offset = spec
        .peak_channel
        .map(|_| root.derive("peak").below(0, spec.peak_period));
    let mut values = vec![0.0; total * c];
    let mut in_peak = vec![false; total];
    for t in 0..total {
        for ch in 0..c {
            let mut v = base(ch, t);
            if let Some(src) = spec.partner(ch) {
                v += spec.coupling * base(src, t);
            }
            values[t * c + ch] = v + spec.noise_std * noise_rng.normal();
        }
        if let (Some(pc), Some(off)) = (spec.peak_channel, peak_offset) {
            let phase = (t + spec.peak_period - off) % spec.peak_period;
            if phase < spec.peak_width {
                // triangular burst peaking in the middle of the width
                let mid = (spec.peak_width - 1) as f64 / 2.0;
                let h = 1.0 - (phase as f64 - mid).abs() / (mid + 1.0);
                values[t * c + pc] += spec.peak_scale * base_std[pc] * h;
                in_peak[t] = true;
            }
        }
    }

    let test_start = spec.train_length;
    let mut labels = vec![0u8; spec.length];
    let mut anomalies = Vec::new();
    if spec.anomaly_rate > 0.0 {
        let mut rng = root.derive("anomalies");
        let budget = ((spec.anomaly_rate * spec.length as f64).round() as usize).max(1);
        let targets = spec.targets();
        let pairs = spec.coupled_pairs();
        let gap = 20;
        let mut labelled = 0;
        let mut attempts = 0;
        while labelled < budget && attempts < 10_000 {
            attempts += 1;
            let remaining = budget - labelled;
            let mut kind = spec.anomaly_types[rng.below(0, spec.anomaly_types.len())];
            if kind != AnomalyKind::Spike && remaining < 50 {
                if spec.anomaly_types.contains(&AnomalyKind::Spike) {
                    kind = AnomalyKind::Spike;
                }
            }
            let len = match kind {
                AnomalyKind::Spike => rng.below(1, 4),
                _ => rng.below(50, 201),
            }
            .min(remaining)
            .min(spec.length);
            if len == 0 || len > spec.length {
                break;
            }
            let start = rng.below(0, spec.length - len + 1);
            let lo = start.saturating_sub(gap);
            let hi = (start + len + gap).min(spec.length);
            if labels[lo..hi].iter().any(|&l| l == 1) {
                continue;
            }
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let channel = match kind {
                AnomalyKind::Spike => {
                    let ch = targets[rng.below(0, targets.len())];
                    let mag = sign * rng.uniform_range(4.0, 6.0) * base_std[ch];
                    for t in start..start + len {
                        values[(test_start + t) * c + ch] += mag;
                    }
                    ch
                }
                AnomalyKind::LevelShift => {
                    let ch = targets[rng.below(0, targets.len())];
                    let mag = sign * rng.uniform_range(1.5, 3.0) * base_std[ch];
                    for t in start..start + len {
                        values[(test_start + t) * c + ch] += mag;
                    }
                    ch
                }
                AnomalyKind::CorrelationBreak => {
                    let (ch, src) = pairs[rng.below(0, pairs.len())];
                    for t in start..start + len {
                        let tt = test_start + t;
                        values[tt * c + ch] -= 2.0 * spec.coupling * base(src, tt);
                    }
                    ch
                }
            };
            labels[start..start + len].iter_mut().for_each(|l| *l = 1);
            labelled += len;
            anomalies.push(InjectedAnomaly {
                kind,
                start,
                len,
                channel,
            });
        }
        anomalies.sort_by_key(|a| a.start);
    }

    let names: Vec<String> = (0..c).map(|i| format!("ch{i}")).collect();
    let train = RawSeries::new(
        Tensor::matrix(spec.train_length, c, values[..test_start * c].to_vec())?,
        Some(vec![0; spec.train_length]),
        names.clone(),
    )?;
    let test = RawSeries::new(
        Tensor::matrix(spec.length, c, values[test_start * c..].to_vec())?,
        Some(labels),
        names,
    )?;
    Ok(SynthData {
        train,
        test,
        anomalies,
        peak_mask: in_peak[test_start..].to_vec(),
    })
}
