//! Synthetic ten-zone system and context-dependent VAR(1) forecast errors.
//!
//! Source index layout: `k = 3 * region + type` with type 0 = load, 1 = solar,
//! 2 = wind, five regions. Region `r` feeds zone indices `2r` and `2r + 1`.
//!
//! Randomness comes from `ChaCha8Rng` seeded with the run seed; every purpose
//! draws from its own stream (see the `STREAM_*` constants), so changing how
//! many values one purpose consumes never shifts another.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cholesky_factor, CholeskyShape};
use crate::sced::{Generator, ZonalSystem, Zone};

pub const N_REGIONS: usize = 5;
pub const N_TYPES: usize = 3;
pub const DIM: usize = N_REGIONS * N_TYPES;
pub const N_ZONES: usize = 10;
/// Length of [`Context::features`].
pub const N_FEATURES: usize = 4 + 3 * N_REGIONS;

pub const ZONE_LOADS: [f64; N_ZONES] = [423.0, 412.0, 445.0, 398.0, 467.0, 389.0, 456.0, 401.0, 478.0, 373.0];
pub const ZONE_CAPS: [f64; N_ZONES] = [550.0, 520.0, 580.0, 490.0, 610.0, 480.0, 590.0, 510.0, 620.0, 550.0];
pub const N_GENERATORS: usize = 54;

pub const STREAM_PRICES: u64 = 1;
pub const STREAM_FLEET: u64 = 2;
pub const STREAM_CONTEXTS: u64 = 3;
pub const STREAM_INNOVATIONS: u64 = 4;
pub const STREAM_ALLOCATION: u64 = 5;
pub const STREAM_PROBE: u64 = 6;

const SOLAR_FLOOR: f64 = 1e-3;
const HOURS_PER_YEAR: f64 = 8760.0;

pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Ten zones with the reference loads and capacities; 54 generators with
/// uniform energy prices on [15, 45] and reserve prices on [1, 8] $/MWh.
pub fn default_system(seed: u64) -> ZonalSystem {
    let zones: Vec<Zone> = (0..N_ZONES).map(|z| Zone { id: z + 1, load_mw: ZONE_LOADS[z] }).collect();
    // Four largest-capacity zones host six units, the rest five.
    let mut by_cap: Vec<usize> = (0..N_ZONES).collect();
    by_cap.sort_by(|&a, &b| ZONE_CAPS[b].total_cmp(&ZONE_CAPS[a]).then(a.cmp(&b)));
    let mut counts = [5usize; N_ZONES];
    for &z in &by_cap[..N_GENERATORS - 5 * N_ZONES] {
        counts[z] = 6;
    }
    let mut fleet = stream(seed, STREAM_FLEET);
    let mut prices = stream(seed, STREAM_PRICES);
    let mut generators = Vec::with_capacity(N_GENERATORS);
    for z in 0..N_ZONES {
        let w: Vec<f64> = (0..counts[z]).map(|_| fleet.random_range(0.5..1.5)).collect();
        let total: f64 = w.iter().sum();
        let mut assigned = 0.0;
        for (k, wk) in w.iter().enumerate() {
            let cap = if k + 1 == counts[z] { ZONE_CAPS[z] - assigned } else { ZONE_CAPS[z] * wk / total };
            assigned += cap;
            generators.push(Generator {
                zone: z + 1,
                g_min_mw: 0.0,
                g_max_mw: cap,
                energy_cost: prices.random_range(15.0..45.0),
                reserve_cost: prices.random_range(1.0..8.0),
            });
        }
    }
    ZonalSystem { zones, generators, allocation: default_allocation(seed) }
}

/// Default relative spread of the per-zone solar and wind footprint factors.
pub const DEFAULT_FOOTPRINT_SPREAD: f64 = 0.25;

pub fn default_allocation(seed: u64) -> DMatrix<f64> {
    allocation_with_spread(seed, DEFAULT_FOOTPRINT_SPREAD)
}

/// Load columns split by zone load share within the region; solar and wind
/// columns by load share times a seeded footprint factor in `1 +- spread`.
/// Every column sums to one.
pub fn allocation_with_spread(seed: u64, spread: f64) -> DMatrix<f64> {
    let mut rng = stream(seed, STREAM_ALLOCATION);
    let mut a = DMatrix::zeros(N_ZONES, DIM);
    for r in 0..N_REGIONS {
        let zs = [2 * r, 2 * r + 1];
        let region_load = ZONE_LOADS[zs[0]] + ZONE_LOADS[zs[1]];
        for t in 0..N_TYPES {
            let k = N_TYPES * r + t;
            let mut w = [0.0; 2];
            for (i, &z) in zs.iter().enumerate() {
                let f = if t == 0 { 1.0 } else { 1.0 + spread * rng.random_range(-1.0..1.0) };
                w[i] = ZONE_LOADS[z] / region_load * f;
            }
            let s = w[0] + w[1];
            for (i, &z) in zs.iter().enumerate() {
                a[(z, k)] = w[i] / s;
            }
        }
    }
    a
}

/// Operating conditions for one hour; forecasts are normalized to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub hour_sin: f64,
    pub hour_cos: f64,
    pub month_sin: f64,
    pub month_cos: f64,
    pub load_forecast: [f64; N_REGIONS],
    pub solar_forecast: [f64; N_REGIONS],
    pub wind_forecast: [f64; N_REGIONS],
}

impl Context {
    /// Feature order: hour sin/cos, month sin/cos, then load, solar and wind
    /// forecasts for regions 1..5.
    pub fn features(&self) -> [f64; N_FEATURES] {
        let mut f = [0.0; N_FEATURES];
        f[0] = self.hour_sin;
        f[1] = self.hour_cos;
        f[2] = self.month_sin;
        f[3] = self.month_cos;
        f[4..9].copy_from_slice(&self.load_forecast);
        f[9..14].copy_from_slice(&self.solar_forecast);
        f[14..19].copy_from_slice(&self.wind_forecast);
        f
    }

    pub fn from_features(f: &[f64]) -> Result<Self> {
        if f.len() != N_FEATURES {
            return Err(Error::Dimension(format!("context needs {N_FEATURES} features, got {}", f.len())));
        }
        let arr = |o: usize| -> [f64; N_REGIONS] { f[o..o + N_REGIONS].try_into().expect("slice length") };
        Ok(Self {
            hour_sin: f[0],
            hour_cos: f[1],
            month_sin: f[2],
            month_cos: f[3],
            load_forecast: arr(4),
            solar_forecast: arr(9),
            wind_forecast: arr(14),
        })
    }

    /// A mid-range daytime context.
    pub fn nominal() -> Self {
        let (hs, hc) = (2.0 * PI * 13.0 / 24.0).sin_cos();
        let (ms, mc) = (2.0 * PI * 0.5).sin_cos();
        Self {
            hour_sin: hs,
            hour_cos: hc,
            month_sin: ms,
            month_cos: mc,
            load_forecast: [0.6; N_REGIONS],
            solar_forecast: [0.5; N_REGIONS],
            wind_forecast: [0.4; N_REGIONS],
        }
    }

    fn validate(&self) -> Result<()> {
        for (s, c, what) in [(self.hour_sin, self.hour_cos, "hour"), (self.month_sin, self.month_cos, "month")] {
            if ((s * s + c * c) - 1.0).abs() > 1e-9 {
                return Err(Error::BadParams(format!("{what} encoding is not on the unit circle")));
            }
        }
        let all = self.load_forecast.iter().chain(&self.solar_forecast).chain(&self.wind_forecast);
        for v in all {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::BadParams(format!("forecast {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Daylight factor in [0, 1] for an hour of day and a day of year.
fn daylight(hour: f64, doy: f64) -> f64 {
    let len = 12.0 + 3.0 * (2.0 * PI * (doy - 172.0) / 365.0).cos();
    let rise = 12.0 - len / 2.0;
    let x = (hour - rise) / len;
    if (0.0..=1.0).contains(&x) {
        (PI * x).sin()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub seed: u64,
    pub ar_coeff: f64,
    pub load_scale: f64,
    pub solar_scale: f64,
    pub wind_scale: f64,
    pub regional_corr: f64,
    pub type_corr: f64,
    /// When set, every hour uses this context instead of the profiles.
    pub constant_context: Option<Context>,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            seed: 42,
            ar_coeff: 0.6,
            load_scale: 16.0,
            solar_scale: 12.0,
            wind_scale: 16.0,
            regional_corr: 0.4,
            type_corr: 0.3,
            constant_context: None,
        }
    }
}

impl GeneratorParams {
    /// Checks ranges and factors the covariance at 1,000 probe contexts.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return Err(Error::BadParams(format!("ar_coeff {} outside [0, 1)", self.ar_coeff)));
        }
        for (v, name) in [(self.load_scale, "load_scale"), (self.solar_scale, "solar_scale"), (self.wind_scale, "wind_scale")] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::BadParams(format!("{name} must be positive")));
            }
        }
        if !(self.regional_corr.abs() < 1.0) || !(0.0..0.5).contains(&self.type_corr) {
            return Err(Error::BadParams("correlation coefficients out of range".into()));
        }
        if let Some(c) = &self.constant_context {
            c.validate()?;
        }
        let mut rng = stream(self.seed, STREAM_PROBE);
        for _ in 0..1000 {
            let (hs, hc) = rng.random_range(0.0..2.0 * PI).sin_cos();
            let (ms, mc) = rng.random_range(0.0..2.0 * PI).sin_cos();
            let mut f = || -> [f64; N_REGIONS] { std::array::from_fn(|_| rng.random_range(0.0..=1.0)) };
            let ctx = Context {
                hour_sin: hs,
                hour_cos: hc,
                month_sin: ms,
                month_cos: mc,
                load_forecast: f(),
                solar_forecast: f(),
                wind_forecast: f(),
            };
            cholesky_factor(&self.covariance(&ctx))
                .map_err(|e| Error::BadParams(format!("covariance not positive definite: {e}")))?;
        }
        Ok(())
    }

    /// Per-source standard deviations `D(ctx)`.
    pub fn scales(&self, ctx: &Context) -> [f64; DIM] {
        let mut s = [0.0; DIM];
        for r in 0..N_REGIONS {
            s[3 * r] = self.load_scale * (0.5 + ctx.load_forecast[r]);
            s[3 * r + 1] = self.solar_scale * ctx.solar_forecast[r].max(SOLAR_FLOOR);
            s[3 * r + 2] = self.wind_scale * (0.3 + ctx.wind_forecast[r]);
        }
        s
    }

    /// Correlation `R_reg (x) R_type(ctx)`: Toeplitz regional decay times an
    /// equicorrelated type block whose strength grows with mean wind.
    pub fn correlation(&self, ctx: &Context) -> DMatrix<f64> {
        let mean_wind = ctx.wind_forecast.iter().sum::<f64>() / N_REGIONS as f64;
        let kappa = self.type_corr * (0.5 + mean_wind);
        let kappa = kappa.min(0.49);
        let rreg = DMatrix::from_fn(N_REGIONS, N_REGIONS, |i, j| self.regional_corr.powi((i as i32 - j as i32).abs()));
        let rtype = DMatrix::from_fn(N_TYPES, N_TYPES, |i, j| if i == j { 1.0 } else { kappa });
        rreg.kronecker(&rtype)
    }

    /// Innovation covariance `Sigma(ctx) = D R D`.
    pub fn covariance(&self, ctx: &Context) -> DMatrix<f64> {
        let s = self.scales(ctx);
        let r = self.correlation(ctx);
        DMatrix::from_fn(DIM, DIM, |i, j| s[i] * r[(i, j)] * s[j])
    }
}

/// Ground-truth shape `chol(Sigma(ctx))`.
pub fn true_shape(params: &GeneratorParams, ctx: &Context) -> Result<CholeskyShape> {
    cholesky_factor(&params.covariance(ctx))
}

/// Contiguous chronological index ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Range<usize>,
    pub tune: Range<usize>,
    pub cal: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    /// Floors the first three fractions; the remainder is the test split.
    pub fn from_fractions(n: usize, fr: [f64; 3]) -> Result<Self> {
        if fr.iter().any(|f| !(*f > 0.0)) || fr.iter().sum::<f64>() >= 1.0 {
            return Err(Error::BadParams(format!("invalid split fractions {fr:?}")));
        }
        let a = (fr[0] * n as f64).floor() as usize;
        let b = a + (fr[1] * n as f64).floor() as usize;
        let c = b + (fr[2] * n as f64).floor() as usize;
        if a == 0 || b == a || c == b || c >= n {
            return Err(Error::TooShort { len: n, needed: 4 });
        }
        Ok(Self { train: 0..a, tune: a..b, cal: b..c, test: c..n })
    }

    pub fn default_for(n: usize) -> Result<Self> {
        Self::from_fractions(n, DEFAULT_FRACTIONS)
    }
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyDataset {
    pub params: GeneratorParams,
    pub contexts: Vec<Context>,
    pub us: Vec<Vec<f64>>,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSidecar {
    n_hours: usize,
    dim: usize,
    params: GeneratorParams,
    split: Split,
}

impl UncertaintyDataset {
    pub fn len(&self) -> usize {
        self.us.len()
    }

    pub fn is_empty(&self) -> bool {
        self.us.is_empty()
    }

    pub fn train(&self) -> &[Vec<f64>] {
        &self.us[self.split.train.clone()]
    }

    pub fn tune(&self) -> &[Vec<f64>] {
        &self.us[self.split.tune.clone()]
    }

    pub fn cal(&self) -> &[Vec<f64>] {
        &self.us[self.split.cal.clone()]
    }

    pub fn test(&self) -> &[Vec<f64>] {
        &self.us[self.split.test.clone()]
    }

    pub fn contexts_of(&self, r: &Range<usize>) -> &[Context] {
        &self.contexts[r.clone()]
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(format!("{stem}.csv")))?));
        w.write_record(csv_header())?;
        for (t, (ctx, u)) in self.contexts.iter().zip(&self.us).enumerate() {
            let mut rec = Vec::with_capacity(1 + N_FEATURES + DIM);
            rec.push(t.to_string());
            rec.extend(ctx.features().iter().map(|v| fmt_f64(*v)));
            rec.extend(u.iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let side = DatasetSidecar { n_hours: self.len(), dim: DIM, params: self.params.clone(), split: self.split.clone() };
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let side: DatasetSidecar = serde_json::from_reader(BufReader::new(File::open(dir.join(format!("{stem}.json")))?))?;
        if side.dim != DIM {
            return Err(Error::Dimension(format!("dataset dim {} != {DIM}", side.dim)));
        }
        let mut rd = csv::Reader::from_reader(BufReader::new(File::open(dir.join(format!("{stem}.csv")))?));
        let mut contexts = Vec::with_capacity(side.n_hours);
        let mut us = Vec::with_capacity(side.n_hours);
        for (t, rec) in rd.records().enumerate() {
            let rec = rec?;
            if rec.len() != 1 + N_FEATURES + DIM {
                return Err(Error::Dimension(format!("row {t} has {} fields", rec.len())));
            }
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|e| Error::Numerical(format!("row {t}: {e}"))))
                .collect::<Result<_>>()?;
            contexts.push(Context::from_features(&vals[..N_FEATURES])?);
            us.push(vals[N_FEATURES..].to_vec());
        }
        if us.len() != side.n_hours || side.split.test.end != us.len() {
            return Err(Error::Dimension(format!("sidecar says {} hours, csv has {}", side.n_hours, us.len())));
        }
        Ok(Self { params: side.params, contexts, us, split: side.split })
    }
}

/// Decimal with 17 significant digits; parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    if !v.is_finite() || v == 0.0 {
        return format!("{v}");
    }
    let sci = format!("{v:.16e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    let decimals = (16 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

fn csv_header() -> Vec<String> {
    let mut h = vec!["t".to_string(), "hour_sin".into(), "hour_cos".into(), "month_sin".into(), "month_cos".into()];
    for kind in ["load_fc", "solar_fc", "wind_fc"] {
        for r in 1..=N_REGIONS {
            h.push(format!("{kind}_{r}"));
        }
    }
    for k in 1..=DIM {
        h.push(format!("u_{k}"));
    }
    h
}

/// Hourly context profiles: diurnal and seasonal load shape, clear-sky solar
/// times a persistent cloudiness process, persistent regional wind.
fn generate_contexts(seed: u64, n: usize) -> Vec<Context> {
    let mut rng = stream(seed, STREAM_CONTEXTS);
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };
    let mut cloud = [0.0f64; N_REGIONS];
    let mut wind_shared = 0.0f64;
    let mut wind_local = [0.0f64; N_REGIONS];
    let mut load_dev = [0.0f64; N_REGIONS];
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let hour = (t % 24) as f64;
        let year_pos = (t as f64 / HOURS_PER_YEAR).fract();
        let doy = year_pos * 365.0;
        let (hs, hc) = (2.0 * PI * hour / 24.0).sin_cos();
        let (ms, mc) = (2.0 * PI * year_pos).sin_cos();
        let day = daylight(hour, doy);
        let diurnal = 0.5 - 0.5 * (2.0 * PI * (hour - 4.0) / 24.0).cos();
        let season = 0.5 * (2.0 * PI * (doy - 200.0) / 365.0).cos() + 0.5;
        wind_shared = 0.97 * wind_shared + 0.25 * normal();
        let mut ctx = Context {
            hour_sin: hs,
            hour_cos: hc,
            month_sin: ms,
            month_cos: mc,
            load_forecast: [0.0; N_REGIONS],
            solar_forecast: [0.0; N_REGIONS],
            wind_forecast: [0.0; N_REGIONS],
        };
        for r in 0..N_REGIONS {
            load_dev[r] = 0.9 * load_dev[r] + 0.05 * normal();
            cloud[r] = 0.95 * cloud[r] + 0.3 * normal();
            wind_local[r] = 0.95 * wind_local[r] + 0.3 * normal();
            let load = 0.25 + 0.4 * diurnal + 0.15 * season + 0.04 * r as f64 + load_dev[r];
            ctx.load_forecast[r] = load.clamp(0.0, 1.0);
            let clear = 1.0 / (1.0 + (-(1.0 + cloud[r])).exp());
            ctx.solar_forecast[r] = (day * clear).clamp(0.0, 1.0);
            let w = 1.0 / (1.0 + (-(wind_shared + wind_local[r] - 0.3)).exp());
            ctx.wind_forecast[r] = w.clamp(0.0, 1.0);
        }
        out.push(ctx);
    }
    out
}

/// Simulates `n_hours` of contexts and VAR(1) errors and applies the default
/// chronological split.
pub fn generate(params: &GeneratorParams, n_hours: usize) -> Result<UncertaintyDataset> {
    generate_with_split(params, n_hours, DEFAULT_FRACTIONS)
}

pub fn generate_with_split(params: &GeneratorParams, n_hours: usize, fractions: [f64; 3]) -> Result<UncertaintyDataset> {
    if n_hours < 48 {
        return Err(Error::TooShort { len: n_hours, needed: 48 });
    }
    params.validate()?;
    let split = Split::from_fractions(n_hours, fractions)?;
    let (contexts, us) = simulate(params, n_hours)?;
    Ok(UncertaintyDataset { params: params.clone(), contexts, us, split })
}

/// Contexts and errors for `n_hours` without a split.
pub fn simulate(params: &GeneratorParams, n_hours: usize) -> Result<(Vec<Context>, Vec<Vec<f64>>)> {
    params.validate()?;
    let contexts = match params.constant_context {
        Some(c) => vec![c; n_hours],
        None => generate_contexts(params.seed, n_hours),
    };
    let mut rng = stream(params.seed, STREAM_INNOVATIONS);
    let mut prev = DVector::<f64>::zeros(DIM);
    let mut us = Vec::with_capacity(n_hours);
    let mut cached: Option<(Context, DMatrix<f64>)> = None;
    for ctx in &contexts {
        let l = match &cached {
            Some((c, l)) if c == ctx => l.clone(),
            _ => {
                let l = true_shape(params, ctx)?.into_matrix();
                cached = Some((*ctx, l.clone()));
                l
            }
        };
        let e = DVector::from_fn(DIM, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut u = &l * e;
        for k in 0..DIM {
            let mut a = params.ar_coeff;
            if k % N_TYPES == 1 && ctx.solar_forecast[k / N_TYPES] <= 0.0 {
                // Night-time solar error does not persist.
                a = 0.0;
            }
            u[k] += a * prev[k];
        }
        us.push(u.iter().copied().collect());
        prev = u;
    }
    Ok((contexts, us))
}

/// Population covariance `(1/n) sum (u - mean)(u - mean)^T`.
pub fn sample_covariance(us: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = us.len();
    let d = us.first().map_or(0, |u| u.len());
    if n < d + 1 {
        return Err(Error::TooShort { len: n, needed: d + 1 });
    }
    let mut mean = DVector::zeros(d);
    for u in us {
        mean += DVector::from_column_slice(u);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for u in us {
        let c = DVector::from_column_slice(u) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    Ok(cov / n as f64)
}

pub fn sample_covariance_shape(us: &[Vec<f64>]) -> Result<CholeskyShape> {
    cholesky_factor(&sample_covariance(us)?)
}

/// Diagonal shape from marginal standard deviations.
pub fn independent_shape(us: &[Vec<f64>]) -> Result<CholeskyShape> {
    let cov = sample_covariance(us)?;
    let diag = DMatrix::from_diagonal(&cov.diagonal());
    cholesky_factor(&diag)
}
