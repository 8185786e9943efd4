//! Grid geometry, prognostic field storage, synthetic scenario generation,
//! canonical source accumulation, and field integration with positivity
//! limiting.
//!
//! Storage is column-major in z: all vertical levels of one column are
//! contiguous, matching the column-wise kernel decomposition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NZ: usize = 60;
pub const DEFAULT_DZ: f64 = 100.0;

/// Reference pressure (Pa) for the Exner/potential-temperature conversion.
pub const P0: f64 = 1.0e5;
/// Pressure scale height (m) of the synthetic sounding.
pub const PRESSURE_SCALE_HEIGHT: f64 = 8000.0;
/// Surface potential temperature (K) of the synthetic sounding.
pub const THETA_SURFACE: f64 = 288.0;
/// Potential-temperature lapse (K/m) of the synthetic sounding.
pub const THETA_LAPSE: f64 = 3.0e-3;
/// Gas constant for dry air (J/kg/K).
pub const RD: f64 = 287.0;
/// Exner exponent R/cp.
pub const KAPPA: f64 = 0.286;

/// Horizontal extents, vertical level count and spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Vertical level spacing in metres.
    pub dz: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, nz: usize, dz: f64) -> Result<Self> {
        if nx < 1 || ny < 1 || nz < 1 {
            return Err(Error::invalid_argument(format!(
                "grid extents must all be >= 1, got {}x{}x{}",
                nx, ny, nz
            )));
        }
        if dz <= 0.0 {
            return Err(Error::invalid_argument(format!(
                "level spacing must be positive, got {}",
                dz
            )));
        }
        Ok(Grid { nx, ny, nz, dz })
    }

    /// Number of vertical columns.
    pub fn columns(&self) -> usize {
        self.nx * self.ny
    }

    /// Total number of grid points.
    pub fn points(&self) -> usize {
        self.columns() * self.nz
    }

    /// Height of the centre of level `k` above the surface.
    pub fn level_height(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.dz
    }
}

/// Alias for the spec-level operation name.
pub fn build_grid(nx: usize, ny: usize, nz: usize, dz: f64) -> Result<Grid> {
    Grid::new(nx, ny, nz, dz)
}

/// What a prognostic q field stores; mass and number fields are clipped to
/// zero on integration, shape moments pass through untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    Mass,
    Number,
    Shape,
    AerosolMass,
}

impl FieldKind {
    pub fn is_clipped(self) -> bool {
        !matches!(self, FieldKind::Shape)
    }
}

/// Hydrometeor categories referenced by the process rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Species {
    Vapour,
    Cloud,
    Rain,
    Ice,
    Snow,
    Graupel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QField {
    pub name: &'static str,
    pub kind: FieldKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoistureMode {
    Warm,
    Cold,
}

impl MoistureMode {
    pub fn label(self) -> &'static str {
        match self {
            MoistureMode::Warm => "warm",
            MoistureMode::Cold => "cold",
        }
    }
}

impl std::fmt::Display for MoistureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Positions of the named fields within the roster. Cold-only fields are
/// `None` under the warm configuration.
#[derive(Debug, Clone, Copy)]
pub struct FieldIndex {
    pub qv: usize,
    pub qc: usize,
    pub qr: usize,
    pub nc: usize,
    pub nr: usize,
    pub qi: Option<usize>,
    pub qs: Option<usize>,
    pub qg: Option<usize>,
    pub ni: Option<usize>,
    pub ns: Option<usize>,
    pub ng: Option<usize>,
    pub mu_rain: Option<usize>,
    pub mu_ice: Option<usize>,
    pub mu_snow: Option<usize>,
}

impl FieldIndex {
    /// Roster index of the mass field of a species.
    pub fn mass(&self, s: Species) -> Option<usize> {
        match s {
            Species::Vapour => Some(self.qv),
            Species::Cloud => Some(self.qc),
            Species::Rain => Some(self.qr),
            Species::Ice => self.qi,
            Species::Snow => self.qs,
            Species::Graupel => self.qg,
        }
    }

    /// Roster index of the number field of a species (vapour has none).
    pub fn number(&self, s: Species) -> Option<usize> {
        match s {
            Species::Vapour => None,
            Species::Cloud => Some(self.nc),
            Species::Rain => Some(self.nr),
            Species::Ice => self.ni,
            Species::Snow => self.ns,
            Species::Graupel => self.ng,
        }
    }

    pub fn shape(&self, s: Species) -> Option<usize> {
        match s {
            Species::Rain => self.mu_rain,
            Species::Ice => self.mu_ice,
            Species::Snow => self.mu_snow,
            _ => None,
        }
    }
}

const WARM_ROSTER: &[QField] = &[
    QField { name: "qv", kind: FieldKind::Mass },
    QField { name: "qc", kind: FieldKind::Mass },
    QField { name: "qr", kind: FieldKind::Mass },
    QField { name: "nc", kind: FieldKind::Number },
    QField { name: "nr", kind: FieldKind::Number },
];

const COLD_ROSTER: &[QField] = &[
    QField { name: "qv", kind: FieldKind::Mass },
    QField { name: "qc", kind: FieldKind::Mass },
    QField { name: "qr", kind: FieldKind::Mass },
    QField { name: "qi", kind: FieldKind::Mass },
    QField { name: "qs", kind: FieldKind::Mass },
    QField { name: "qg", kind: FieldKind::Mass },
    QField { name: "nc", kind: FieldKind::Number },
    QField { name: "nr", kind: FieldKind::Number },
    QField { name: "ni", kind: FieldKind::Number },
    QField { name: "ns", kind: FieldKind::Number },
    QField { name: "ng", kind: FieldKind::Number },
    QField { name: "mu_rain", kind: FieldKind::Shape },
    QField { name: "mu_ice", kind: FieldKind::Shape },
    QField { name: "mu_snow", kind: FieldKind::Shape },
    QField { name: "aero_aitken", kind: FieldKind::AerosolMass },
    QField { name: "aero_accum", kind: FieldKind::AerosolMass },
    QField { name: "aero_coarse", kind: FieldKind::AerosolMass },
    QField { name: "aero_incloud", kind: FieldKind::AerosolMass },
];

/// Moisture configuration: mode plus its fixed, ordered field roster.
#[derive(Debug, Clone)]
pub struct MoistureConfig {
    pub mode: MoistureMode,
    roster: &'static [QField],
    index: FieldIndex,
}

impl MoistureConfig {
    pub fn new(mode: MoistureMode) -> Self {
        let roster = match mode {
            MoistureMode::Warm => WARM_ROSTER,
            MoistureMode::Cold => COLD_ROSTER,
        };
        let pos = |name: &str| roster.iter().position(|f| f.name == name);
        let index = FieldIndex {
            qv: pos("qv").unwrap(),
            qc: pos("qc").unwrap(),
            qr: pos("qr").unwrap(),
            nc: pos("nc").unwrap(),
            nr: pos("nr").unwrap(),
            qi: pos("qi"),
            qs: pos("qs"),
            qg: pos("qg"),
            ni: pos("ni"),
            ns: pos("ns"),
            ng: pos("ng"),
            mu_rain: pos("mu_rain"),
            mu_ice: pos("mu_ice"),
            mu_snow: pos("mu_snow"),
        };
        MoistureConfig { mode, roster, index }
    }

    pub fn roster(&self) -> &'static [QField] {
        self.roster
    }

    pub fn len(&self) -> usize {
        self.roster.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self) -> &FieldIndex {
        &self.index
    }

    /// Species whose mass sediments under this configuration.
    pub fn precipitating(&self) -> &'static [Species] {
        match self.mode {
            MoistureMode::Warm => &[Species::Rain],
            MoistureMode::Cold => &[Species::Rain, Species::Ice, Species::Snow, Species::Graupel],
        }
    }
}

/// One 3D prognostic array, stored column-contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    data: Vec<f64>,
    nz: usize,
}

impl Field {
    pub fn zeros(grid: &Grid) -> Self {
        Field {
            data: vec![0.0; grid.points()],
            nz: grid.nz,
        }
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn columns(&self) -> usize {
        self.data.len() / self.nz
    }

    pub fn col(&self, c: usize) -> &[f64] {
        &self.data[c * self.nz..(c + 1) * self.nz]
    }

    pub fn col_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.nz..(c + 1) * self.nz]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// The prognostic model state shared by every component.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub grid: Grid,
    pub config: MoistureConfig,
    /// One field per roster entry, in roster order.
    pub q: Vec<Field>,
    pub theta: Field,
    /// Reference pressure by level (Pa), strictly decreasing with height.
    pub pressure_profile: Vec<f64>,
    /// Simulation time in seconds.
    pub time: f64,
}

impl ModelState {
    /// Order-independent sum of all prognostic values (fixed canonical
    /// iteration order), used as a cheap cross-run equality proxy.
    pub fn checksum(&self) -> f64 {
        let mut sum = 0.0;
        for f in &self.q {
            for v in f.values() {
                sum += v;
            }
        }
        for v in self.theta.values() {
            sum += v;
        }
        sum
    }

    /// Exact bit-level equality of all prognostic fields.
    pub fn bits_equal(&self, other: &ModelState) -> bool {
        if self.q.len() != other.q.len() {
            return false;
        }
        let eq = |a: &[f64], b: &[f64]| {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        };
        self.q
            .iter()
            .zip(&other.q)
            .all(|(a, b)| eq(a.values(), b.values()))
            && eq(self.theta.values(), other.theta.values())
    }

    /// Air density at level `k` from the reference pressure and local theta.
    pub fn density_profile(&self, col: usize) -> Vec<f64> {
        let theta = self.theta.col(col);
        (0..self.grid.nz)
            .map(|k| {
                let p = self.pressure_profile[k];
                let t = theta[k] * (p / P0).powf(KAPPA);
                p / (RD * t)
            })
            .collect()
    }
}

/// How cloudy columns are placed over the horizontal domain.
///
/// `Independent` marks each column cloudy with probability
/// `cloudy_fraction`, independently. `Deck` places a single contiguous
/// cloudy band covering `round(fraction * columns)` columns at a seeded
/// random offset; each column's marginal cloud probability is still the
/// requested fraction, but the marks are spatially coherent, which is what
/// produces the per-worker load imbalance a static schedule suffers from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudPattern {
    Independent,
    Deck,
}

impl Default for CloudPattern {
    fn default() -> Self {
        CloudPattern::Deck
    }
}

/// Peak cloud-water mixing ratio of the synthetic bubble (kg/kg).
const BUBBLE_QC_PEAK: f64 = 2.0e-3;
/// Rain seeded inside the bubble as a fraction of cloud water.
const BUBBLE_RAIN_FRACTION: f64 = 0.15;
/// Droplet number per unit cloud mass (1/kg per kg/kg).
const CLOUD_NUMBER_PER_MASS: f64 = 2.4e11;
/// Rain-drop number per unit rain mass.
const RAIN_NUMBER_PER_MASS: f64 = 1.9e9;
/// Background vapour as a fraction of liquid saturation.
const CLEAR_RH: f64 = 0.5;
/// Peak in-bubble vapour excess over `CLEAR_RH`, reaching slight
/// supersaturation at the bubble centre.
const BUBBLE_RH_BOOST: f64 = 0.55;

fn tetens_qsat(t: f64, p: f64) -> f64 {
    let es = 610.78 * ((17.27 * (t - 273.15)) / (t - 35.86)).exp();
    0.622 * es / (p - es).max(1.0)
}

/// Build a deterministic synthetic scenario: a smooth sounding everywhere,
/// with a liquid-water bubble between levels `nz/4` and `3*nz/5` in cloudy
/// columns. Clear columns have `qc == 0` everywhere and stay subsaturated.
pub fn init_state(
    grid: Grid,
    config: MoistureConfig,
    cloudy_fraction: f64,
    seed: u64,
) -> Result<ModelState> {
    init_state_with(grid, config, cloudy_fraction, seed, CloudPattern::Independent)
}

pub fn init_state_with(
    grid: Grid,
    config: MoistureConfig,
    cloudy_fraction: f64,
    seed: u64,
    pattern: CloudPattern,
) -> Result<ModelState> {
    if !(0.0..=1.0).contains(&cloudy_fraction) {
        return Err(Error::invalid_argument(format!(
            "cloudy_fraction must be in [0,1], got {}",
            cloudy_fraction
        )));
    }

    let nz = grid.nz;
    let ncols = grid.columns();

    let pressure_profile: Vec<f64> = (0..nz)
        .map(|k| P0 * (-grid.level_height(k) / PRESSURE_SCALE_HEIGHT).exp())
        .collect();
    let theta_profile: Vec<f64> = (0..nz)
        .map(|k| THETA_SURFACE + THETA_LAPSE * grid.level_height(k))
        .collect();
    let qsat_profile: Vec<f64> = (0..nz)
        .map(|k| {
            let p = pressure_profile[k];
            let t = theta_profile[k] * (p / P0).powf(KAPPA);
            tetens_qsat(t, p)
        })
        .collect();

    let mut q: Vec<Field> = (0..config.len()).map(|_| Field::zeros(&grid)).collect();
    let mut theta = Field::zeros(&grid);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Cloudy-band membership test; `Deck` draws one offset up front so the
    // later per-column loop consumes RNG values in a fixed order either way.
    let deck: Option<(usize, usize)> = match pattern {
        CloudPattern::Independent => None,
        CloudPattern::Deck => {
            let n_cloudy = (cloudy_fraction * ncols as f64).round() as usize;
            let offset = if ncols > 0 { rng.gen_range(0..ncols) } else { 0 };
            Some((offset, n_cloudy))
        }
    };

    let band_lo = nz / 4;
    let band_hi = (3 * nz) / 5;
    let idx = *config.index();

    for c in 0..ncols {
        let cloudy = match deck {
            Some((offset, n_cloudy)) => {
                let rel = (c + ncols - offset) % ncols;
                rel < n_cloudy
            }
            None => rng.gen::<f64>() < cloudy_fraction,
        };
        // Per-column amplitude jitter; drawn only for cloudy columns.
        let amp = if cloudy { 0.8 + 0.4 * rng.gen::<f64>() } else { 1.0 };

        theta.col_mut(c).copy_from_slice(&theta_profile);
        for k in 0..nz {
            let in_band = cloudy && k >= band_lo && k < band_hi && band_hi > band_lo;
            let envelope = if in_band {
                let x = (k - band_lo) as f64 / (band_hi - band_lo) as f64;
                (std::f64::consts::PI * x).sin().powi(2)
            } else {
                0.0
            };

            let qv = qsat_profile[k] * (CLEAR_RH + BUBBLE_RH_BOOST * envelope);
            let qc = amp * BUBBLE_QC_PEAK * envelope;
            let qr = BUBBLE_RAIN_FRACTION * qc;

            q[idx.qv].col_mut(c)[k] = qv;
            q[idx.qc].col_mut(c)[k] = qc;
            q[idx.qr].col_mut(c)[k] = qr;
            q[idx.nc].col_mut(c)[k] = qc * CLOUD_NUMBER_PER_MASS;
            q[idx.nr].col_mut(c)[k] = qr * RAIN_NUMBER_PER_MASS;
        }
    }

    Ok(ModelState {
        grid,
        config,
        q,
        theta,
        pressure_profile,
        time: 0.0,
    })
}

/// Per-component tendency contribution for every prognostic field.
#[derive(Debug, Clone)]
pub struct SourceBuffer {
    pub component_index: usize,
    /// One tendency field per roster entry (units of the field per second).
    pub q: Vec<Field>,
    /// Latent-heating tendency for theta (K/s).
    pub theta: Field,
}

impl SourceBuffer {
    pub fn zeros(state: &ModelState, component_index: usize) -> Self {
        SourceBuffer {
            component_index,
            q: (0..state.config.len())
                .map(|_| Field::zeros(&state.grid))
                .collect(),
            theta: Field::zeros(&state.grid),
        }
    }

    fn same_extents(&self, other: &SourceBuffer) -> bool {
        self.q.len() == other.q.len()
            && self
                .q
                .iter()
                .zip(&other.q)
                .all(|(a, b)| a.values().len() == b.values().len() && a.nz() == b.nz())
            && self.theta.values().len() == other.theta.values().len()
    }
}

/// Sum per-component source buffers in ascending `component_index` order,
/// regardless of the order they were produced or supplied. The result is
/// bitwise identical for any permutation of the input.
pub fn accumulate_sources(buffers: &[SourceBuffer]) -> Result<SourceBuffer> {
    let first = buffers
        .first()
        .ok_or_else(|| Error::invalid_argument("no source buffers supplied"))?;

    let mut order: Vec<usize> = (0..buffers.len()).collect();
    order.sort_by_key(|&i| buffers[i].component_index);
    for pair in order.windows(2) {
        let (a, b) = (
            buffers[pair[0]].component_index,
            buffers[pair[1]].component_index,
        );
        if a == b {
            return Err(Error::invalid_argument(format!(
                "duplicate component_index {}",
                a
            )));
        }
    }
    for b in buffers {
        if !first.same_extents(b) {
            return Err(Error::ExtentMismatch(format!(
                "source buffer for component {} has different extents",
                b.component_index
            )));
        }
    }

    let mut total = SourceBuffer {
        component_index: buffers[order[0]].component_index,
        q: first
            .q
            .iter()
            .map(|f| Field {
                data: vec![0.0; f.values().len()],
                nz: f.nz(),
            })
            .collect(),
        theta: Field {
            data: vec![0.0; first.theta.values().len()],
            nz: first.theta.nz(),
        },
    };

    for &i in &order {
        let b = &buffers[i];
        for (dst, src) in total.q.iter_mut().zip(&b.q) {
            for (d, s) in dst.values_mut().iter_mut().zip(src.values()) {
                *d += s;
            }
        }
        for (d, s) in total
            .theta
            .values_mut()
            .iter_mut()
            .zip(b.theta.values())
        {
            *d += s;
        }
    }
    Ok(total)
}

/// Audit of mass removed by the positivity clip, per roster field.
#[derive(Debug, Clone, Serialize)]
pub struct ClipReport {
    /// Total clipped amount per field (field units, summed over cells).
    pub clipped: Vec<f64>,
    pub total: f64,
}

/// Apply the accumulated sources: `q' = max(q + dt*s, 0)` for mass and
/// number fields (shape moments integrate unclipped), and update theta from
/// the latent-heating tendency. Returns the clip audit.
pub fn integrate(state: &mut ModelState, total: &SourceBuffer, dt: f64) -> Result<ClipReport> {
    if dt <= 0.0 {
        return Err(Error::invalid_argument(format!(
            "dt must be positive, got {}",
            dt
        )));
    }
    if total.q.len() != state.q.len()
        || total
            .q
            .iter()
            .zip(&state.q)
            .any(|(a, b)| a.values().len() != b.values().len())
    {
        return Err(Error::ExtentMismatch(
            "source buffer extents do not match state".into(),
        ));
    }

    let roster = state.config.roster();
    let mut clipped = vec![0.0; state.q.len()];
    for (f, (field, tend)) in state.q.iter_mut().zip(&total.q).enumerate() {
        let clip = roster[f].kind.is_clipped();
        let mut field_clip = 0.0;
        for (v, s) in field.values_mut().iter_mut().zip(tend.values()) {
            let next = *v + dt * s;
            if clip && next < 0.0 {
                field_clip -= next;
                *v = 0.0;
            } else {
                *v = next;
            }
        }
        clipped[f] = field_clip;
    }
    for (v, s) in state
        .theta
        .values_mut()
        .iter_mut()
        .zip(total.theta.values())
    {
        *v += dt * s;
    }
    let total_clipped = clipped.iter().sum();
    Ok(ClipReport {
        clipped,
        total: total_clipped,
    })
}
