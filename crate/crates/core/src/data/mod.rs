//! Dataset ingestion and windowing.
//!
//! Series are `T_total×C` matrices with optional per-timestep 0/1 labels.
//! Normalisation statistics always come from the training series and are
//! reused on test data. Windows are cut without overlap by default and the
//! training windows are split chronologically 80/20 into train and
//! validation.

mod io;
mod synth;

pub use io::{load_csv, load_labels, load_series, write_labels, write_series};
pub use synth::{synth_generate, AnomalyKind, InjectedAnomaly, SynthData, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// Full recording: `values` is `T_total×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub values: Tensor,
    pub labels: Option<Vec<u8>>,
    pub channel_names: Vec<String>,
}

impl RawSeries {
    pub fn new(values: Tensor, labels: Option<Vec<u8>>, channel_names: Vec<String>) -> Result<Self> {
        let (t, c) = values.dims2()?;
        if c == 0 {
            return Err(Error::Dimension("series needs at least one channel".into()));
        }
        if channel_names.len() != c {
            return Err(Error::Dimension(format!(
                "{} channel names for {c} channels",
                channel_names.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != t {
                return Err(Error::Dimension(format!(
                    "{} labels for {t} timesteps",
                    l.len()
                )));
            }
        }
        Ok(RawSeries {
            values,
            labels,
            channel_names,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }
}

/// Per-channel normalisation parameters fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub standardize: bool,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    pub fn fit(series: &RawSeries, standardize: bool) -> Result<Self> {
        let (t, c) = series.values.dims2()?;
        if t == 0 {
            return Err(Error::Config("cannot fit normalisation on an empty series".into()));
        }
        let mut mean = vec![0.0; c];
        for i in 0..t {
            for (m, v) in mean.iter_mut().zip(series.values.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; c];
        for i in 0..t {
            for ((s, v), m) in var.iter_mut().zip(series.values.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / t as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormStats {
            mean,
            std,
            standardize,
        })
    }

    pub fn apply(&self, series: &RawSeries) -> Result<RawSeries> {
        let (t, c) = series.values.dims2()?;
        if c != self.mean.len() {
            return Err(Error::Dimension(format!(
                "normalisation fitted on {} channels, series has {c}",
                self.mean.len()
            )));
        }
        let mut out = series.values.data().to_vec();
        for i in 0..t {
            for j in 0..c {
                let v = &mut out[i * c + j];
                *v -= self.mean[j];
                if self.standardize {
                    *v /= self.std[j];
                }
            }
        }
        RawSeries::new(
            Tensor::matrix(t, c, out)?,
            series.labels.clone(),
            series.channel_names.clone(),
        )
    }
}

/// Subtracts the training mean (and divides by the training std when
/// `standardize`) from both series.
pub fn normalize(
    train: &RawSeries,
    test: &RawSeries,
    standardize: bool,
) -> Result<(RawSeries, RawSeries, NormStats)> {
    let stats = NormStats::fit(train, standardize)?;
    Ok((stats.apply(train)?, stats.apply(test)?, stats))
}

/// One `T×C` slice of a series.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Row of the source series where the window starts.
    pub start: usize,
    pub values: Tensor,
    pub labels: Vec<u8>,
}

pub const DEFAULT_WINDOW: usize = 100;

/// Cuts `⌊(T_total − length)/stride⌋ + 1` windows; the trailing remainder is
/// dropped. Missing labels become zeros.
pub fn make_windows(series: &RawSeries, length: usize, stride: usize) -> Result<Vec<Window>> {
    if length == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window length ({length}) and stride ({stride}) must be positive"
        )));
    }
    let (t, c) = series.values.dims2()?;
    if t < length {
        return Err(Error::EmptyWindowSet { len: t, window: length });
    }
    let count = (t - length) / stride + 1;
    let data = series.values.data();
    Ok((0..count)
        .map(|w| {
            let start = w * stride;
            let values = Tensor::matrix(length, c, data[start * c..(start + length) * c].to_vec())
                .expect("window shape");
            let labels = series
                .labels
                .as_ref()
                .map_or_else(|| vec![0; length], |l| l[start..start + length].to_vec());
            Window {
                start,
                values,
                labels,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Windows with their split membership.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<Window>,
    pub splits: Vec<Split>,
    pub norm: Option<NormStats>,
}

impl WindowSet {
    pub fn test(windows: Vec<Window>, norm: Option<NormStats>) -> Self {
        let splits = vec![Split::Test; windows.len()];
        WindowSet {
            windows,
            splits,
            norm,
        }
    }

    pub fn of(&self, split: Split) -> impl Iterator<Item = &Window> {
        self.windows
            .iter()
            .zip(&self.splits)
            .filter(move |(_, s)| **s == split)
            .map(|(w, _)| w)
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }

    pub fn window_len(&self) -> usize {
        self.windows.first().map_or(0, |w| w.values.rows())
    }

    pub fn channels(&self) -> usize {
        self.windows.first().map_or(0, |w| w.values.cols())
    }
}

pub const MIN_TRAIN_WINDOWS: usize = 5;

/// Chronological 80/20 split: the first `⌊4n/5⌋` windows train, the rest
/// validate.
pub fn split_train_valid(windows: Vec<Window>, norm: Option<NormStats>) -> Result<WindowSet> {
    let n = windows.len();
    if n < MIN_TRAIN_WINDOWS {
        return Err(Error::Config(format!(
            "{n} training windows; at least {MIN_TRAIN_WINDOWS} are needed for an 80/20 split"
        )));
    }
    let n_train = n * 4 / 5;
    let splits = (0..n)
        .map(|i| if i < n_train { Split::Train } else { Split::Valid })
        .collect();
    Ok(WindowSet {
        windows,
        splits,
        norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(rows: &[Vec<f64>]) -> RawSeries {
        let c = rows[0].len();
        RawSeries::new(
            Tensor::from_rows(rows).unwrap(),
            None,
            (0..c).map(|i| format!("c{i}")).collect(),
        )
        .unwrap()
    }

    fn ramp(t: usize) -> RawSeries {
        series(&(0..t).map(|i| vec![i as f64]).collect::<Vec<_>>())
    }

    #[test]
    fn constant_channel_normalises_to_zero() {
        let s = series(&[vec![5.0], vec![5.0], vec![5.0]]);
        let (a, _, stats) = normalize(&s, &s, false).unwrap();
        assert!(a.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.mean, vec![5.0]);

        let (a, _, stats) = normalize(&s, &s, true).unwrap();
        assert_eq!(stats.std, vec![STD_FLOOR]);
        assert!(a.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_channel() {
        let s = series(&[vec![1.0], vec![2.0], vec![3.0]]);
        let (a, _, _) = normalize(&s, &s, false).unwrap();
        assert_eq!(a.values.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn train_mean_is_reused_on_test() {
        let train = series(&[vec![1.0], vec![3.0]]);
        let test = series(&[vec![10.0], vec![12.0]]);
        let (_, t, _) = normalize(&train, &test, false).unwrap();
        assert_eq!(t.values.data(), &[8.0, 10.0]);
    }

    #[test]
    fn window_counts() {
        let w = make_windows(&ramp(250), 100, 100).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].values.at(0, 0), 0.0);
        assert_eq!(w[0].values.at(99, 0), 99.0);
        assert_eq!(w[1].values.at(0, 0), 100.0);
        assert_eq!(w[1].values.at(99, 0), 199.0);

        assert_eq!(make_windows(&ramp(100), 100, 100).unwrap().len(), 1);
        assert_eq!(make_windows(&ramp(1000), 100, 100).unwrap().len(), 10);
        assert_eq!(make_windows(&ramp(10), 4, 2).unwrap().len(), 4);
        assert!(matches!(
            make_windows(&ramp(99), 100, 100),
            Err(Error::EmptyWindowSet { .. })
        ));
    }

    #[test]
    fn labels_are_sliced_with_values() {
        let mut s = ramp(6);
        s.labels = Some(vec![0, 1, 0, 0, 1, 1]);
        let w = make_windows(&s, 3, 3).unwrap();
        assert_eq!(w[0].labels, vec![0, 1, 0]);
        assert_eq!(w[1].labels, vec![0, 1, 1]);
    }

    #[test]
    fn split_proportions() {
        let w = |n: usize| make_windows(&ramp(n * 10), 10, 10).unwrap();
        let set = split_train_valid(w(10), None).unwrap();
        assert_eq!((set.count(Split::Train), set.count(Split::Valid)), (8, 2));
        // chronological: validation windows are the latest ones
        assert_eq!(set.of(Split::Valid).next().unwrap().start, 80);

        let set = split_train_valid(w(5), None).unwrap();
        assert_eq!((set.count(Split::Train), set.count(Split::Valid)), (4, 1));

        assert!(matches!(split_train_valid(w(4), None), Err(Error::Config(_))));
    }
}
