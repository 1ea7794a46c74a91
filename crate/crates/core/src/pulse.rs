//! Sampled control pulses: generators, measurement noise and the CSV format.
//!
//! A [`Pulse`] is a uniformly sampled real series. Training signals are
//! dimensionless, Rabi-frequency controls are in rad/µs; `dt` is in µs.
//!
//! The CSV layout is one header line followed by one amplitude per line:
//!
//! ```text
//! # dt=0.002 label=omega_b
//! 1.00000000000000000e0
//! ...
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Seeded generator used for every random draw in the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pulse {
    samples: Vec<f64>,
    dt: f64,
    label: String,
}

impl Pulse {
    pub fn new(samples: Vec<f64>, dt: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::validation("empty pulse"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "pulse sample {i} is not finite ({})",
                samples[i]
            )));
        }
        check_dt(dt)?;
        Ok(Pulse {
            samples,
            dt,
            label: String::new(),
        })
    }

    /// Unit-spaced pulse, the convention for dimensionless training data.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        Pulse::new(samples, 1.0)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into().replace(['\n', '\r'], " ");
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Result<Self> {
        check_dt(dt)?;
        self.dt = dt;
        Ok(self)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Total duration `len · dt`.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * self.dt
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Same metadata, new samples. The length may change.
    pub(crate) fn map_samples(&self, samples: Vec<f64>) -> Result<Pulse> {
        Ok(Pulse::new(samples, self.dt)?.with_label(self.label.clone()))
    }

    pub fn scaled(&self, factor: f64) -> Result<Pulse> {
        self.map_samples(self.samples.iter().map(|v| v * factor).collect())
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::validation(format!("dt must be positive, got {dt}")));
    }
    Ok(())
}

/// An input pulse together with the output the distortion produced from it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: Pulse,
    pub output: Pulse,
}

impl TrainingPair {
    pub fn new(input: Pulse, output: Pulse) -> Self {
        TrainingPair { input, output }
    }
}

/// I.i.d. uniform samples in `[-amplitude, amplitude]`.
pub fn generate_random_noise(steps: usize, amplitude: f64, seed: u64) -> Result<Pulse> {
    if steps == 0 {
        return Err(Error::invalid("random-noise pulse needs at least one step"));
    }
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return Err(Error::invalid(format!(
            "amplitude must be non-negative, got {amplitude}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let samples = (0..steps)
        .map(|_| amplitude * rng.random_range(-1.0..=1.0))
        .collect();
    Ok(Pulse::from_samples(samples)?.with_label("random-noise"))
}

/// Natural cubic spline through `knots` uniformly spaced abscissae spanning the
/// pulse, with seeded ordinates drawn uniformly from `[-1, 1]`.
pub fn generate_spline(steps: usize, knots: usize, seed: u64) -> Result<Pulse> {
    if knots < 2 {
        return Err(Error::invalid(format!(
            "a spline needs at least 2 knots, got {knots}"
        )));
    }
    if knots > steps {
        return Err(Error::invalid(format!(
            "knots ({knots}) must not exceed steps ({steps})"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let ordinates: Vec<f64> = (0..knots).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let spacing = (steps - 1) as f64 / (knots - 1) as f64;
    let second = natural_spline_second_derivatives(&ordinates, spacing);
    let samples = (0..steps)
        .map(|n| {
            let t = n as f64 / spacing;
            let seg = (t.floor() as usize).min(knots - 2);
            let a = (seg + 1) as f64 - t;
            let b = t - seg as f64;
            let h2 = spacing * spacing;
            a * ordinates[seg]
                + b * ordinates[seg + 1]
                + ((a * a * a - a) * second[seg] + (b * b * b - b) * second[seg + 1]) * h2 / 6.0
        })
        .collect();
    Ok(Pulse::from_samples(samples)?.with_label(format!("spline-{knots}")))
}

/// Second derivatives at the knots of a natural cubic spline with uniform
/// spacing `h` (Thomas algorithm on the tridiagonal system).
fn natural_spline_second_derivatives(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // interior equations: m[i-1] + 4 m[i] + m[i+1] = 6 (y[i+1] - 2y[i] + y[i-1]) / h²
    let k = n - 2;
    let mut diag = vec![4.0; k];
    let mut rhs: Vec<f64> = (1..n - 1)
        .map(|i| 6.0 * (y[i + 1] - 2.0 * y[i] + y[i - 1]) / (h * h))
        .collect();
    for i in 1..k {
        let w = 1.0 / diag[i - 1];
        diag[i] -= w;
        rhs[i] -= w * rhs[i - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for i in (0..k - 1).rev() {
        m[i + 1] = (rhs[i] - m[i + 2]) / diag[i];
    }
    m
}

/// `amplitude · cos(2π · cycles · n / steps + phase)`.
pub fn generate_cosine(steps: usize, cycles: f64, amplitude: f64, phase: f64) -> Result<Pulse> {
    if steps == 0 {
        return Err(Error::invalid("cosine pulse needs at least one step"));
    }
    let w = std::f64::consts::TAU * cycles / steps as f64;
    let samples = (0..steps)
        .map(|n| amplitude * (w * n as f64 + phase).cos())
        .collect();
    Ok(Pulse::from_samples(samples)?.with_label(format!("cosine-{cycles}")))
}

/// `amplitude · exp(-(n - center)² / (2σ²))`.
pub fn generate_gaussian_pulse(
    steps: usize,
    center: f64,
    sigma: f64,
    amplitude: f64,
) -> Result<Pulse> {
    if steps == 0 {
        return Err(Error::invalid("gaussian pulse needs at least one step"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let samples = (0..steps)
        .map(|n| {
            let d = n as f64 - center;
            amplitude * (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    Ok(Pulse::from_samples(samples)?.with_label(format!("gaussian-{sigma}")))
}

/// Adds an independent `Normal(0, sigma)` draw to every sample.
pub fn add_measurement_noise(p: &Pulse, sigma: f64, seed: u64) -> Result<Pulse> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!(
            "noise sigma must be non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(p.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng_from_seed(seed);
    p.map_samples(p.samples.iter().map(|v| v + normal.sample(&mut rng)).collect())
}

pub fn format_pulse(p: &Pulse) -> String {
    let mut out = String::with_capacity(26 * (p.len() + 1));
    let _ = writeln!(out, "# dt={:e} label={}", p.dt, p.label);
    for v in &p.samples {
        let _ = writeln!(out, "{v:.17e}");
    }
    out
}

pub fn write_pulse(path: &Path, p: &Pulse) -> Result<()> {
    write_atomic(path, format_pulse(p).as_bytes())
}

pub fn read_pulse(path: &Path) -> Result<Pulse> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pulse(&text, path)
}

pub fn parse_pulse(text: &str, path: &Path) -> Result<Pulse> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let header = header
        .strip_prefix('#')
        .ok_or_else(|| parse_err(1, "header must start with '#'".into()))?
        .trim_start();
    let rest = header
        .strip_prefix("dt=")
        .ok_or_else(|| parse_err(1, "header must start with 'dt='".into()))?;
    let (dt_text, label) = match rest.split_once(' ') {
        Some((d, l)) => (d, l.strip_prefix("label=").unwrap_or(l)),
        None => (rest, ""),
    };
    let dt: f64 = dt_text
        .trim()
        .parse()
        .map_err(|_| parse_err(1, format!("invalid dt '{dt_text}'")))?;
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| parse_err(i + 1, format!("invalid amplitude '{line}'")))?;
        if !v.is_finite() {
            return Err(Error::validation(format!(
                "{}: line {}: amplitude is not finite",
                path.display(),
                i + 1
            )));
        }
        samples.push(v);
    }
    if samples.is_empty() {
        return Err(Error::validation(format!("{}: empty pulse", path.display())));
    }
    Ok(Pulse::new(samples, dt)?.with_label(label.trim_end()))
}

/// Writes `<name>.in.csv` / `<name>.out.csv` into `dir`.
pub fn write_training_pair(dir: &Path, name: &str, pair: &TrainingPair) -> Result<()> {
    write_pulse(&dir.join(format!("{name}.in.csv")), &pair.input)?;
    write_pulse(&dir.join(format!("{name}.out.csv")), &pair.output)
}

/// Reads every `<name>.in.csv` / `<name>.out.csv` pair in `dir`, sorted by name.
pub fn read_training_set(dir: &Path) -> Result<Vec<(String, TrainingPair)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let file_name = entry.file_name();
        if let Some(name) = file_name.to_str().and_then(|s| s.strip_suffix(".in.csv")) {
            names.push((name.to_string(), entry.path()));
        }
    }
    names.sort();
    names
        .into_iter()
        .map(|(name, in_path)| {
            let out_path = dir.join(format!("{name}.out.csv"));
            if !out_path.exists() {
                return Err(Error::validation(format!(
                    "training pair '{name}' has no output file {}",
                    out_path.display()
                )));
            }
            let pair = TrainingPair::new(read_pulse(&in_path)?, read_pulse(&out_path)?);
            Ok((name, pair))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_noise_bounds_and_length() {
        let p = generate_random_noise(4000, 1.0, 7).unwrap();
        assert_eq!(p.len(), 4000);
        assert!(p.samples().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn random_noise_zero_amplitude() {
        let p = generate_random_noise(1, 0.0, 0).unwrap();
        assert_eq!(p.samples(), &[0.0]);
    }

    #[test]
    fn random_noise_is_deterministic() {
        let a = generate_random_noise(100, 2.5, 11).unwrap();
        let b = generate_random_noise(100, 2.5, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_random_noise(100, 2.5, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_noise_rejects_zero_steps() {
        assert!(matches!(
            generate_random_noise(0, 1.0, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn spline_length_and_continuity() {
        let p = generate_spline(500, 5, 3).unwrap();
        assert_eq!(p.len(), 500);
        let max_jump = p
            .samples()
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .fold(0.0, f64::max);
        // ordinates are within [-1, 1]
        assert!(max_jump < 2.0 * 1.0);
        assert!(max_jump < 0.1);
    }

    #[test]
    fn two_knot_spline_is_affine() {
        for seed in 0..5 {
            let p = generate_spline(10, 2, seed).unwrap();
            let s = p.samples();
            let slope = (s[9] - s[0]) / 9.0;
            for (n, v) in s.iter().enumerate() {
                assert!((v - (s[0] + slope * n as f64)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn spline_interpolates_knots() {
        let p = generate_spline(101, 11, 5).unwrap();
        let mut rng = rng_from_seed(5);
        let ordinates: Vec<f64> = (0..11).map(|_| rng.random_range(-1.0..=1.0)).collect();
        for (i, y) in ordinates.iter().enumerate() {
            assert!((p.samples()[i * 10] - y).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_rejects_bad_knots() {
        assert!(matches!(generate_spline(10, 1, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(generate_spline(10, 11, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cosine_examples() {
        let p = generate_cosine(4, 1.0, 1.0, 0.0).unwrap();
        for (v, e) in p.samples().iter().zip([1.0, 0.0, -1.0, 0.0]) {
            assert!((v - e).abs() < 1e-12);
        }
        let c = generate_cosine(100, 0.0, 2.0, 0.0).unwrap();
        assert!(c.samples().iter().all(|&v| v == 2.0));
        let q = generate_cosine(500, 12.5, 1.0, std::f64::consts::FRAC_PI_3).unwrap();
        assert!((q.samples()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_examples() {
        let p = generate_gaussian_pulse(3, 1.0, 1.0, 1.0).unwrap();
        let e = (-0.5f64).exp();
        assert!((p.samples()[0] - e).abs() < 1e-15);
        assert_eq!(p.samples()[1], 1.0);
        assert!((p.samples()[2] - e).abs() < 1e-15);

        let s = generate_gaussian_pulse(101, 50.0, 10.0, 1.0).unwrap();
        for k in 0..=50 {
            assert!((s.samples()[50 - k] - s.samples()[50 + k]).abs() < 1e-12);
        }
        let peak = generate_gaussian_pulse(20, 7.0, 3.0, 4.5).unwrap();
        assert_eq!(peak.samples()[7], 4.5);
    }

    #[test]
    fn zero_noise_is_identity() {
        let p = generate_random_noise(50, 1.0, 1).unwrap();
        assert_eq!(add_measurement_noise(&p, 0.0, 9).unwrap(), p);
    }

    #[test]
    fn noise_statistics() {
        let p = generate_random_noise(4000, 1.0, 2).unwrap();
        let q = add_measurement_noise(&p, 1e-4, 3).unwrap();
        assert_eq!(q.len(), p.len());
        assert_eq!(q.dt(), p.dt());
        assert_eq!(q.label(), p.label());
        let d: Vec<f64> = q.samples().iter().zip(p.samples()).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        assert!((var.sqrt() - 1e-4).abs() < 1e-5);

        let small = add_measurement_noise(&generate_spline(500, 8, 1).unwrap(), 1e-9, 4).unwrap();
        let base = generate_spline(500, 8, 1).unwrap();
        let max = small
            .samples()
            .iter()
            .zip(base.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-8);
    }

    #[test]
    fn pulse_rejects_non_finite() {
        assert!(Pulse::from_samples(vec![1.0, f64::NAN]).is_err());
        assert!(Pulse::from_samples(vec![]).is_err());
        assert!(Pulse::new(vec![1.0], 0.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let p = generate_random_noise(257, 3.0, 99)
            .unwrap()
            .with_dt(0.002)
            .unwrap()
            .with_label("omega b");
        write_pulse(&path, &p).unwrap();
        assert_eq!(read_pulse(&path).unwrap(), p);
    }

    #[test]
    fn csv_header_only_is_empty_pulse() {
        let err = parse_pulse("# dt=1 label=x\n", Path::new("h.csv")).unwrap_err();
        assert!(err.to_string().contains("empty pulse"), "{err}");
    }

    #[test]
    fn csv_parse_error_names_line() {
        let err = parse_pulse("# dt=1 label=x\n1.0\nabc\n", Path::new("bad.csv")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn csv_nan_is_validation_error() {
        let err = parse_pulse("# dt=1 label=x\n1.0\nNaN\n", Path::new("nan.csv")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn training_set_round_trip_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b", "a"] {
            let x = generate_random_noise(10, 1.0, 1).unwrap();
            let y = generate_random_noise(12, 1.0, 2).unwrap();
            write_training_pair(dir.path(), name, &TrainingPair::new(x, y)).unwrap();
        }
        let set = read_training_set(dir.path()).unwrap();
        let names: Vec<_> = set.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(set[0].1.output.len(), 12);
    }
}
