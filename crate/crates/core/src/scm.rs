//! Synthetic grounded-diagnosis world driven by an explicit structural causal model.
//!
//! Endogenous variables are the lesion box `A`, the pathology `P` and the
//! diagnosis `Y`. Exogenous noise covers visual cell flips, label flips and
//! query jitter, and a confounder that writes a global spurious channel which
//! tracks `Y` in the observational regime. Sampling always follows
//! `A -> P -> Y`; the image is rendered after all latents are drawn.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::{StreamRng, Streams};
use crate::util::sha256_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Noise {
    /// Per-cell flip probability of each pathology channel.
    pub visual_flip: f64,
    /// Probability that `y` is replaced by a different class.
    pub label_flip: f64,
    /// Probability that the observed query type is replaced by a different one.
    pub query_jitter: f64,
    /// Confounder strength: probability that the spurious channel encodes `y`.
    pub confounder: f64,
}

impl Default for Noise {
    fn default() -> Self {
        Self {
            visual_flip: 0.05,
            label_flip: 0.2,
            query_jitter: 0.05,
            confounder: 0.95,
        }
    }
}

impl Noise {
    pub fn noiseless(confounder: f64) -> Self {
        Self {
            visual_flip: 0.0,
            label_flip: 0.0,
            query_jitter: 0.0,
            confounder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CausalWorld {
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_path: usize,
    pub n_diag: usize,
    pub n_query: usize,
    pub lesion_h: usize,
    pub lesion_w: usize,
    /// Anatomical regions tile the grid as `region_rows × region_cols`.
    pub region_rows: usize,
    pub region_cols: usize,
    /// pathology → diagnosis, the noiseless core of the diagnosis mechanism.
    pub diag_table: Vec<usize>,
    /// Optional region-dependent override `[region][pathology] → diagnosis`.
    pub diag_by_region: Option<Vec<Vec<usize>>>,
    /// region → admissible pathology classes.
    pub path_support: Vec<Vec<usize>>,
    pub noise: Noise,
    pub seed: u64,
}

impl Default for CausalWorld {
    fn default() -> Self {
        let n_path = 4;
        let regions = 4;
        Self {
            grid_h: 12,
            grid_w: 12,
            n_path,
            n_diag: 4,
            n_query: 2,
            lesion_h: 6,
            lesion_w: 6,
            region_rows: 2,
            region_cols: 2,
            diag_table: (0..n_path).collect(),
            diag_by_region: None,
            path_support: (0..regions)
                .map(|r| vec![r % n_path, (r + 1) % n_path])
                .collect(),
            noise: Noise::default(),
            seed: 0,
        }
    }
}

/// Intervention regime for [`sample_instance`]. `None` values are drawn from the
/// intervention distribution (uniform over admissible values).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Regime {
    Observational,
    DoA(Option<BBox>),
    DoP(Option<usize>),
}

impl Regime {
    pub fn is_interventional(&self) -> bool {
        !matches!(self, Regime::Observational)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regime::Observational => "observational",
            Regime::DoA(_) => "do_a",
            Regime::DoP(_) => "do_p",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observational" | "obs" => Ok(Regime::Observational),
            "do_a" | "do_A" => Ok(Regime::DoA(None)),
            "do_p" | "do_P" => Ok(Regime::DoP(None)),
            other => Err(Error::UnknownRegime(other.to_string())),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Locate,
    Characterize,
    Conclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Step {
    Locate(BBox),
    Characterize(usize),
    Conclude(usize),
}

impl Step {
    pub fn kind(&self) -> StepKind {
        match self {
            Step::Locate(_) => StepKind::Locate,
            Step::Characterize(_) => StepKind::Characterize,
            Step::Conclude(_) => StepKind::Conclude,
        }
    }
}

/// Row-major `h × w × channels` cell features.
///
/// Channel 0 marks anatomy (region id scaled into (0,1]), channels
/// `1..=n_path` are pathology indicators and the last channel is spurious.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize, channels: usize) -> Self {
        Self {
            h,
            w,
            channels,
            data: vec![0.0; h * w * channels],
        }
    }

    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let at = (y * self.w + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    #[inline]
    fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let at = (y * self.w + x) * self.channels;
        &mut self.data[at..at + self.channels]
    }

    pub fn mean_pool(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for chunk in self.data.chunks_exact(self.channels) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let n = (self.h * self.w) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// Mean cell features inside `b` (clipped to the grid); zeros if empty.
    pub fn region_mean(&self, b: &BBox) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        let (x0, y0) = (b.x_min.max(0) as usize, b.y_min.max(0) as usize);
        let (x1, y1) = (
            (b.x_max.max(0) as usize).min(self.w),
            (b.y_max.max(0) as usize).min(self.h),
        );
        if x1 <= x0 || y1 <= y0 {
            return out;
        }
        for y in y0..y1 {
            for x in x0..x1 {
                for (o, v) in out.iter_mut().zip(self.cell(x, y)) {
                    *o += v;
                }
            }
        }
        let n = ((x1 - x0) * (y1 - y0)) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// Realized confounder: whether the spurious channel was aligned with `y`, and the code written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confounder {
    pub aligned: bool,
    pub code: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseDraws {
    pub label_flipped: bool,
    pub query_jittered: bool,
    pub true_query: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedInstance {
    /// Provenance key `purpose/index`; identifies the instance across files.
    pub key: String,
    pub image: Image,
    pub query: usize,
    pub gt_box: BBox,
    pub gt_path: usize,
    pub gt_diag: usize,
    pub gt_chain: Vec<Step>,
    pub confounder: Confounder,
    pub regime: Regime,
    pub noise: NoiseDraws,
}

impl CausalWorld {
    pub fn noiseless() -> Self {
        Self {
            noise: Noise::noiseless(0.95),
            ..Self::default()
        }
    }

    pub fn n_regions(&self) -> usize {
        self.region_rows * self.region_cols
    }

    /// Cell feature dimension `d`.
    pub fn channels(&self) -> usize {
        self.n_path + 2
    }

    pub fn spurious_channel(&self) -> usize {
        self.n_path + 1
    }

    pub fn path_channel(&self, path: usize) -> usize {
        1 + path
    }

    pub fn hash(&self) -> String {
        sha256_json(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidWorld(m));
        if self.grid_h == 0 || self.grid_w == 0 {
            return bad("empty grid".into());
        }
        if self.n_path == 0 || self.n_diag == 0 || self.n_query == 0 {
            return bad("class counts must be positive".into());
        }
        if self.lesion_h == 0
            || self.lesion_w == 0
            || self.lesion_h > self.grid_h
            || self.lesion_w > self.grid_w
        {
            return bad("lesion does not fit the grid".into());
        }
        if self.region_rows == 0
            || self.region_cols == 0
            || self.region_rows > self.grid_h
            || self.region_cols > self.grid_w
        {
            return bad("invalid region layout".into());
        }
        if self.diag_table.len() != self.n_path {
            return bad(format!(
                "diag_table covers {} of {} pathology classes",
                self.diag_table.len(),
                self.n_path
            ));
        }
        if let Some(&d) = self.diag_table.iter().find(|&&d| d >= self.n_diag) {
            return bad(format!("diag_table entry {d} out of range"));
        }
        if let Some(by_region) = &self.diag_by_region {
            if by_region.len() != self.n_regions()
                || by_region
                    .iter()
                    .any(|row| row.len() != self.n_path || row.iter().any(|&d| d >= self.n_diag))
            {
                return bad("diag_by_region must be n_regions × n_path with valid classes".into());
            }
        }
        if self.path_support.len() != self.n_regions() {
            return bad(format!(
                "path_support has {} regions, expected {}",
                self.path_support.len(),
                self.n_regions()
            ));
        }
        for (r, support) in self.path_support.iter().enumerate() {
            if support.is_empty() {
                return bad(format!("region {r} has empty pathology support"));
            }
            if support.iter().any(|&p| p >= self.n_path) {
                return bad(format!("region {r} support has out-of-range class"));
            }
        }
        let n = &self.noise;
        for (name, p) in [
            ("visual_flip", n.visual_flip),
            ("label_flip", n.label_flip),
            ("query_jitter", n.query_jitter),
        ] {
            if !(0.0..=0.5).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 0.5]"));
            }
        }
        if !(0.0..=1.0).contains(&n.confounder) {
            return bad(format!(
                "confounder strength {} outside [0, 1]",
                n.confounder
            ));
        }
        Ok(())
    }

    pub fn region_of_cell(&self, x: usize, y: usize) -> usize {
        let rr = (y * self.region_rows / self.grid_h).min(self.region_rows - 1);
        let rc = (x * self.region_cols / self.grid_w).min(self.region_cols - 1);
        rr * self.region_cols + rc
    }

    /// Region containing the box center.
    pub fn region_of(&self, b: &BBox) -> usize {
        let (cx, cy) = self.center_cell(b);
        self.region_of_cell(cx, cy)
    }

    fn center_cell(&self, b: &BBox) -> (usize, usize) {
        let (cx, cy) = b.center();
        let cx = (cx.floor().max(0.0) as usize).min(self.grid_w - 1);
        let cy = (cy.floor().max(0.0) as usize).min(self.grid_h - 1);
        (cx, cy)
    }

    /// Query band (horizontal stripe) containing the box center.
    pub fn query_band(&self, b: &BBox) -> usize {
        let (_, cy) = self.center_cell(b);
        (cy * self.n_query / self.grid_h).min(self.n_query - 1)
    }

    pub fn support(&self, b: &BBox) -> &[usize] {
        &self.path_support[self.region_of(b)]
    }

    /// All lesion-sized boxes inside the grid, in row-major order of their corner.
    pub fn lesion_positions(&self) -> Vec<BBox> {
        let mut out = Vec::new();
        for y in 0..=(self.grid_h - self.lesion_h) {
            for x in 0..=(self.grid_w - self.lesion_w) {
                out.push(BBox::new(
                    x as i32,
                    y as i32,
                    (x + self.lesion_w) as i32,
                    (y + self.lesion_h) as i32,
                ));
            }
        }
        out
    }

    fn check_box(&self, b: &BBox) -> Result<()> {
        if b.fits(self.grid_w, self.grid_h) {
            Ok(())
        } else {
            Err(Error::InvalidBox(b.to_string()))
        }
    }

    pub fn diag_of(&self, region: usize, path: usize) -> usize {
        match &self.diag_by_region {
            Some(by_region) => by_region[region][path],
            None => self.diag_table[path],
        }
    }

    pub fn gold_chain(&self, b: &BBox, path: usize) -> Vec<Step> {
        vec![
            Step::Locate(*b),
            Step::Characterize(path),
            Step::Conclude(self.diag_of(self.region_of(b), path)),
        ]
    }

    /// Sample an instance under `regime`; the output depends only on the world,
    /// the regime and the state of `rng`.
    pub fn sample(&self, regime: Regime, rng: &mut StreamRng) -> Result<GroundedInstance> {
        sample_instance(self, regime, rng)
    }

    /// Sample instance `index` of the named stream family `purpose`.
    pub fn sample_keyed(
        &self,
        regime: Regime,
        streams: &Streams,
        purpose: &str,
        index: u64,
    ) -> Result<GroundedInstance> {
        let mut rng = streams.stream(purpose, index);
        let mut inst = sample_instance(self, regime, &mut rng)?;
        inst.key = format!("{purpose}/{index}");
        Ok(inst)
    }
}

fn other_class(rng: &mut StreamRng, n: usize, avoid: usize) -> usize {
    debug_assert!(n >= 2);
    let k = rng.gen_range(0..n - 1);
    if k >= avoid {
        k + 1
    } else {
        k
    }
}

pub fn sample_instance(
    world: &CausalWorld,
    regime: Regime,
    rng: &mut StreamRng,
) -> Result<GroundedInstance> {
    world.validate()?;
    let positions = world.lesion_positions();

    // Query and anatomical localization (A).
    let true_query = rng.gen_range(0..world.n_query);
    let in_band: Vec<BBox> = positions
        .iter()
        .copied()
        .filter(|b| world.query_band(b) == true_query)
        .collect();
    let band = if in_band.is_empty() {
        &positions
    } else {
        &in_band
    };

    let (gt_box, gt_path) = match regime {
        Regime::Observational => {
            let b = *band.choose(rng).expect("non-empty positions");
            let p = *world.support(&b).choose(rng).expect("validated support");
            (b, p)
        }
        Regime::DoA(value) => {
            let b = match value {
                Some(b) => {
                    world.check_box(&b)?;
                    b
                }
                None => *positions.choose(rng).expect("non-empty positions"),
            };
            let p = *world.support(&b).choose(rng).expect("validated support");
            (b, p)
        }
        Regime::DoP(value) => {
            let p = match value {
                Some(p) if p >= world.n_path => {
                    return Err(Error::DoValueOutOfRange {
                        variable: "P",
                        value: p,
                        limit: world.n_path,
                    })
                }
                Some(p) => p,
                None => rng.gen_range(0..world.n_path),
            };
            let admits = |b: &&BBox| world.support(b).contains(&p);
            let mut candidates: Vec<BBox> = band.iter().filter(admits).copied().collect();
            if candidates.is_empty() {
                candidates = positions.iter().filter(admits).copied().collect();
            }
            let b = *candidates.choose(rng).ok_or(Error::DoValueOutOfRange {
                variable: "P",
                value: p,
                limit: world.n_path,
            })?;
            (b, p)
        }
    };

    // Diagnosis (Y) with label-flip noise.
    let clean_diag = world.diag_of(world.region_of(&gt_box), gt_path);
    let label_flipped = world.n_diag > 1 && rng.gen_bool(world.noise.label_flip);
    let gt_diag = if label_flipped {
        other_class(rng, world.n_diag, clean_diag)
    } else {
        clean_diag
    };

    // Confounder: tracks y observationally, decorrelated under intervention.
    let aligned = !regime.is_interventional() && rng.gen_bool(world.noise.confounder);
    let code = if aligned {
        gt_diag
    } else {
        rng.gen_range(0..world.n_diag)
    };

    let query_jittered = world.n_query > 1 && rng.gen_bool(world.noise.query_jitter);
    let query = if query_jittered {
        other_class(rng, world.n_query, true_query)
    } else {
        true_query
    };

    let image = render(world, &gt_box, gt_path, code, rng);

    Ok(GroundedInstance {
        key: String::new(),
        image,
        query,
        gt_box,
        gt_path,
        gt_diag,
        gt_chain: world.gold_chain(&gt_box, gt_path),
        confounder: Confounder { aligned, code },
        regime,
        noise: NoiseDraws {
            label_flipped,
            query_jittered,
            true_query,
        },
    })
}

fn render(
    world: &CausalWorld,
    lesion: &BBox,
    path: usize,
    code: usize,
    rng: &mut StreamRng,
) -> Image {
    let mut img = Image::zeros(world.grid_h, world.grid_w, world.channels());
    let n_regions = world.n_regions() as f64;
    let spurious = world.spurious_channel();
    let flip = world.noise.visual_flip;
    for y in 0..world.grid_h {
        for x in 0..world.grid_w {
            let region = world.region_of_cell(x, y);
            let inside = lesion.contains_cell(x, y);
            let cell = img.cell_mut(x, y);
            cell[0] = (region + 1) as f64 / n_regions;
            for k in 0..world.n_path {
                let lit = inside && k == path;
                let flipped = flip > 0.0 && rng.gen_bool(flip);
                cell[1 + k] = if lit ^ flipped { 1.0 } else { 0.0 };
            }
            cell[spurious] = (code + 1) as f64;
        }
    }
    img
}

/// Rule-based causal consistency between two adjacent reasoning steps.
pub fn oracle_consistent(world: &CausalWorld, a: &Step, b: &Step) -> bool {
    match (a, b) {
        (Step::Locate(bx), Step::Characterize(p)) => {
            bx.fits(world.grid_w, world.grid_h) && world.support(bx).contains(p)
        }
        (Step::Characterize(p), Step::Conclude(d)) => {
            *p < world.n_path && world.diag_table[*p] == *d
        }
        _ => false,
    }
}

/// Diagnosis implied by a located pathology. The box only matters when the
/// world carries a region-dependent table.
pub fn implied_diagnosis(world: &CausalWorld, b: &BBox, path: usize) -> Result<usize> {
    if path >= world.n_path {
        return Err(Error::PathOutOfRange(path));
    }
    world.check_box(b)?;
    Ok(world.diag_of(world.region_of(b), path))
}
