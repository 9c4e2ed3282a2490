//! Synthetic longitudinal chest CT studies with exact ground truth.
//!
//! Each study is described analytically in a template frame: two ellipsoidal
//! lungs, lesions made of a consolidation core inside a ground-glass halo, and
//! optionally a posterior pleural effusion band straddling the lung boundary.
//! Timepoint `t` samples the template through `φ_t`, with `φ_0 = id` and
//! `φ_{t+1}(x) = φ_t(x + u_t(x))` for smooth sinusoidal fields `u_t`, so
//! `M_{t+1}(x) = M_t(x + u_t(x))` holds exactly for the lung masks and `u_t` is
//! the registration oracle. Lesions grow or shrink between timepoints.
//!
//! Intensities are synthetic class priors plus Gaussian noise, not clinical
//! measurements.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::study::{Split, Study, StudyEntry, StudyManifest, Timepoint, TimepointEntry};
use crate::volume::{Geometry, PathologyClass, Volume3D};
use crate::{CtVolume, DisplacementField, LabelVolume};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub grid_size: usize,
    /// Voxel spacing in mm.
    pub spacing: [f64; 3],
    pub n_studies: usize,
    /// Relative train/val/test weights; studies are assigned in index order.
    pub split_ratio: [f64; 3],
    pub timepoints_per_study: usize,
    /// Inclusive range of lesions per study.
    pub lesion_count: [usize; 2],
    /// Consolidation core radius range as a fraction of `grid_size`.
    pub lesion_radius: [f64; 2],
    /// Ground-glass halo radius over core radius at the first timepoint.
    pub halo_ratio: f64,
    /// Relative volume change per interval; progressing lesions multiply by
    /// `1 + rate`, recovering ones divide by it.
    pub cons_rate: f64,
    pub ggo_rate: f64,
    pub pleff_rate: f64,
    /// Chance that a lesion or effusion progresses over an interval.
    pub progression_probability: f64,
    pub pleff_probability: f64,
    /// Effusion band half-width as a fraction of the lung radius.
    pub pleff_thickness: f64,
    /// Upper bound of each displacement component, in voxels.
    pub deformation_amplitude: f64,
    /// Wavelength of the sinusoidal modes as a multiple of `grid_size`.
    pub deformation_wavelength: f64,
    pub noise_sigma: f64,
    /// Inclusive range of days between consecutive scans.
    pub day_gap: [u32; 2],
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid_size: 64,
            spacing: [5.0; 3],
            n_studies: 10,
            split_ratio: [0.6, 0.2, 0.2],
            timepoints_per_study: 2,
            lesion_count: [1, 3],
            lesion_radius: [0.05, 0.1],
            halo_ratio: 1.6,
            cons_rate: 0.6,
            ggo_rate: 0.4,
            pleff_rate: 0.5,
            progression_probability: 0.5,
            pleff_probability: 0.5,
            pleff_thickness: 0.1,
            deformation_amplitude: 3.0,
            deformation_wavelength: 2.0,
            noise_sigma: 25.0,
            day_gap: [5, 21],
            seed: 0,
        }
    }
}

/// Intensity prior (HU) for each class before noise.
pub fn class_hu(class: PathologyClass) -> f64 {
    match class {
        PathologyClass::Background => -1000.0,
        PathologyClass::HealthyLung => -850.0,
        PathologyClass::GroundGlass => -500.0,
        PathologyClass::Consolidation => 0.0,
        PathologyClass::PleuralEffusion => 10.0,
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("phantom: {m}")));
        if self.grid_size < 32 {
            return bad(format!("grid_size {} must be at least 32", self.grid_size));
        }
        if !(self.deformation_amplitude >= 0.0 && self.deformation_amplitude < self.grid_size as f64 / 8.0) {
            return bad(format!(
                "deformation_amplitude {} must lie in [0, grid_size/8)",
                self.deformation_amplitude
            ));
        }
        if !(2..=3).contains(&self.timepoints_per_study) {
            return bad("timepoints_per_study must be 2 or 3".into());
        }
        if self.lesion_count[0] > self.lesion_count[1] {
            return bad("lesion_count range is inverted".into());
        }
        let [r0, r1] = self.lesion_radius;
        if !(r0 > 0.0 && r0 <= r1 && r1 <= 0.15) {
            return bad("lesion_radius must satisfy 0 < min <= max <= 0.15".into());
        }
        if !(self.halo_ratio >= 1.0) {
            return bad("halo_ratio must be at least 1".into());
        }
        for (name, v) in [("cons_rate", self.cons_rate), ("ggo_rate", self.ggo_rate), ("pleff_rate", self.pleff_rate)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        for (name, p) in [
            ("progression_probability", self.progression_probability),
            ("pleff_probability", self.pleff_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.pleff_thickness > 0.0 && self.pleff_thickness < 0.3) {
            return bad("pleff_thickness must lie in (0, 0.3)".into());
        }
        if !(self.deformation_wavelength > 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("deformation_wavelength must be positive and noise_sigma non-negative".into());
        }
        if self.spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("spacing must be positive".into());
        }
        if self.split_ratio.iter().any(|r| !(*r >= 0.0)) || self.split_ratio.iter().sum::<f64>() <= 0.0 {
            return bad("split_ratio must be non-negative with a positive sum".into());
        }
        if self.day_gap[0] == 0 || self.day_gap[0] > self.day_gap[1] {
            return bad("day_gap must be a non-empty range of positive days".into());
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new([self.grid_size; 3], self.spacing, [0.0; 3]).expect("validated spacing")
    }

    /// Bound on `|∂u_i/∂x_j|` for every generated field.
    pub fn displacement_gradient_bound(&self) -> f64 {
        self.deformation_amplitude * 2.0 * PI / (self.deformation_wavelength * self.grid_size as f64)
    }

    /// Number of studies in each of train, val and test.
    pub fn split_sizes(&self) -> [usize; 3] {
        let total: f64 = self.split_ratio.iter().sum();
        let n = self.n_studies as f64;
        let train = ((n * self.split_ratio[0] / total).round() as usize).min(self.n_studies);
        let val = ((n * self.split_ratio[1] / total).round() as usize).min(self.n_studies - train);
        [train, val, self.n_studies - train - val]
    }

    pub fn split_of(&self, study_index: usize) -> Split {
        let [train, val, _] = self.split_sizes();
        if study_index < train {
            Split::Train
        } else if study_index < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// A generated study and the exact pull-back fields between its timepoints:
/// `displacements[t]` maps voxels of `t+1` to positions in `t` (voxel units).
#[derive(Debug, Clone)]
pub struct PhantomStudy {
    pub study: Study,
    pub displacements: Vec<DisplacementField>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalized position; inside when its norm is at most 1.
    fn local(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.center[a]) / self.radii[a])
    }
}

#[derive(Debug, Clone, Copy)]
struct Lesion {
    center: [f64; 3],
    core: f64,
    halo: f64,
}

#[derive(Debug, Clone, Copy)]
struct Sinusoid {
    wave: [f64; 3],
    phase: f64,
    weight: f64,
}

/// `u_c(x) = Σ_m w_m sin(k_m·x + ψ_m)` per component, with `Σ|w_m| = A`.
#[derive(Debug, Clone)]
struct SmoothField {
    components: [Vec<Sinusoid>; 3],
}

impl SmoothField {
    const MODES: usize = 3;

    fn random(rng: &mut ChaCha8Rng, amplitude: f64, wavelength: f64) -> Self {
        let k = 2.0 * PI / wavelength;
        let components = std::array::from_fn(|_| {
            let mut modes: Vec<Sinusoid> = (0..Self::MODES)
                .map(|_| {
                    let dir = random_unit(rng);
                    Sinusoid {
                        wave: dir.map(|d| d * k),
                        phase: rng.random_range(0.0..2.0 * PI),
                        weight: rng.random_range(-1.0..1.0),
                    }
                })
                .collect();
            let norm: f64 = modes.iter().map(|m| m.weight.abs()).sum();
            for m in &mut modes {
                m.weight *= if norm > 0.0 { amplitude / norm } else { 0.0 };
            }
            modes
        });
        Self { components }
    }

    fn at(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|c| {
            self.components[c]
                .iter()
                .map(|m| m.weight * (m.wave[0] * p[0] + m.wave[1] * p[1] + m.wave[2] * p[2] + m.phase).sin())
                .sum()
        })
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn norm(q: [f64; 3]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt()
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

/// Template anatomy at one timepoint.
#[derive(Debug, Clone)]
struct Anatomy {
    lungs: [Ellipsoid; 2],
    lesions: Vec<Lesion>,
    /// Effusion band half-width per lung; zero when absent.
    pleff: [f64; 2],
}

impl Anatomy {
    const PLEFF_POSTERIOR: f64 = 0.45;

    fn label(&self, p: [f64; 3]) -> (PathologyClass, bool) {
        let mut in_lung = false;
        let mut effusion = false;
        for (lung, &w) in self.lungs.iter().zip(&self.pleff) {
            let q = lung.local(p);
            let n = norm(q);
            in_lung |= n <= 1.0;
            // Posterior band straddling the boundary: +y is posterior.
            effusion |= w > 0.0 && n > 1.0 - w && n <= 1.0 + 0.5 * w && q[1] >= Self::PLEFF_POSTERIOR * n;
        }
        let class = if in_lung {
            if self.lesions.iter().any(|l| dist(p, l.center) <= l.core) {
                PathologyClass::Consolidation
            } else if self.lesions.iter().any(|l| dist(p, l.center) <= l.halo) {
                PathologyClass::GroundGlass
            } else if effusion {
                PathologyClass::PleuralEffusion
            } else {
                PathologyClass::HealthyLung
            }
        } else if effusion {
            PathologyClass::PleuralEffusion
        } else {
            PathologyClass::Background
        };
        (class, in_lung)
    }

    fn evolve(&self, cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Self {
        let factor = |rng: &mut ChaCha8Rng, rate: f64| {
            if rng.random_bool(cfg.progression_probability) {
                1.0 + rate
            } else {
                1.0 / (1.0 + rate)
            }
        };
        let lesions = self
            .lesions
            .iter()
            .map(|l| {
                let f = factor(rng, cfg.cons_rate);
                let shell = (l.halo.powi(3) - l.core.powi(3)) * factor(rng, cfg.ggo_rate);
                let core = l.core * f.cbrt();
                Lesion { center: l.center, core, halo: (core.powi(3) + shell).cbrt() }
            })
            .collect();
        let pleff = self.pleff.map(|w| if w > 0.0 { (w * factor(rng, cfg.pleff_rate)).min(0.3) } else { 0.0 });
        Self { lungs: self.lungs, lesions, pleff }
    }
}

fn random_anatomy(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Anatomy {
    let n = cfg.grid_size as f64;
    let jitter = |rng: &mut ChaCha8Rng, v: f64, rel: f64| v * (1.0 + rng.random_range(-rel..rel));
    let mid = (n - 1.0) / 2.0;
    let radii = [jitter(rng, 0.17 * n, 0.06), jitter(rng, 0.30 * n, 0.06), jitter(rng, 0.36 * n, 0.06)];
    let lungs = [-1.0, 1.0].map(|side| Ellipsoid {
        center: [mid + side * 0.21 * n + rng.random_range(-0.01..0.01) * n, mid + rng.random_range(-0.02..0.02) * n, mid],
        radii: radii.map(|r| r * rng.random_range(0.97..1.03)),
    });
    let count = rng.random_range(cfg.lesion_count[0]..=cfg.lesion_count[1]);
    let lesions = (0..count)
        .map(|_| {
            let lung = lungs[rng.random_range(0..2)];
            let core = rng.random_range(cfg.lesion_radius[0]..=cfg.lesion_radius[1]) * n;
            // Keep the core inside the lung through a couple of growth steps.
            let shortest = lung.radii.iter().cloned().fold(f64::MAX, f64::min);
            let reach = (1.0 - 1.4 * core / shortest).clamp(0.0, 0.6);
            let q = loop {
                let q: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0) * reach);
                if norm(q) <= reach {
                    break q;
                }
            };
            Lesion {
                center: std::array::from_fn(|a| lung.center[a] + q[a] * lung.radii[a]),
                core,
                halo: core * cfg.halo_ratio,
            }
        })
        .collect();
    let pleff = [(); 2].map(|_| {
        if rng.random_bool(cfg.pleff_probability) {
            cfg.pleff_thickness * rng.random_range(0.7..1.3)
        } else {
            0.0
        }
    });
    Anatomy { lungs, lesions, pleff }
}

fn study_rng(cfg: &PhantomConfig, study_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(study_index as u64);
    rng
}

/// Deterministic in `(cfg, study_index)`.
pub fn generate_study(cfg: &PhantomConfig, study_index: usize) -> Result<PhantomStudy> {
    cfg.validate()?;
    let geometry = cfg.geometry();
    let mut rng = study_rng(cfg, study_index);
    let wavelength = cfg.deformation_wavelength * cfg.grid_size as f64;

    let mut anatomy = random_anatomy(cfg, &mut rng);
    let fields: Vec<SmoothField> = (1..cfg.timepoints_per_study)
        .map(|_| SmoothField::random(&mut rng, cfg.deformation_amplitude, wavelength))
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");

    let mut timepoints = Vec::with_capacity(cfg.timepoints_per_study);
    let mut day = 0u32;
    for t in 0..cfg.timepoints_per_study {
        if t > 0 {
            anatomy = anatomy.evolve(cfg, &mut rng);
            day += rng.random_range(cfg.day_gap[0]..=cfg.day_gap[1]);
        }
        let (ct, lung_mask, pathology) = render(&anatomy, &fields[..t], geometry, &noise, &mut rng);
        timepoints.push(Timepoint { timepoint_index: t, acquisition_day: day, ct, lung_mask, pathology: Some(pathology) });
    }

    let displacements = fields
        .iter()
        .map(|f| {
            Volume3D::from_fn(geometry, |x, y, z| f.at([x as f64, y as f64, z as f64]).map(|v| v as f32))
        })
        .collect();
    let study = Study::new(format!("phantom_{study_index:03}"), timepoints)?;
    Ok(PhantomStudy { study, displacements })
}

/// `φ_t(x)` for `fields = [u_0, .., u_{t-1}]`.
fn pull_back(fields: &[SmoothField], x: [f64; 3]) -> [f64; 3] {
    let mut p = x;
    for f in fields.iter().rev() {
        let u = f.at(p);
        p = [p[0] + u[0], p[1] + u[1], p[2] + u[2]];
    }
    p
}

fn render(
    anatomy: &Anatomy,
    fields: &[SmoothField],
    geometry: Geometry,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> (CtVolume, LabelVolume, LabelVolume) {
    let n = geometry.len();
    let mut ct = Vec::with_capacity(n);
    let mut lung = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = geometry.coords(i);
        let p = pull_back(fields, c.map(|v| v as f64));
        let (class, in_lung) = anatomy.label(p);
        ct.push((class_hu(class) + noise.sample(rng)) as f32);
        lung.push(u8::from(in_lung));
        labels.push(class.index());
    }
    (
        Volume3D::new(geometry, ct).expect("rendered length"),
        Volume3D::new(geometry, lung).expect("rendered length"),
        Volume3D::new(geometry, labels).expect("rendered length"),
    )
}

fn relative(p: &Path, base: &Path) -> PathBuf {
    p.strip_prefix(base).unwrap_or(p).to_path_buf()
}

/// Writes every study under `out` together with `manifest.json`.
pub fn generate_dataset(cfg: &PhantomConfig, out: impl AsRef<Path>) -> Result<StudyManifest> {
    cfg.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(cfg.n_studies);
    for index in 0..cfg.n_studies {
        let ps = generate_study(cfg, index)?;
        let dir = out.join(ps.study.patient_id());
        fs::create_dir_all(&dir)?;
        let mut timepoints = Vec::new();
        for tp in ps.study.timepoints() {
            let t = tp.timepoint_index;
            let ct = dir.join(format!("t{t}_ct.nii"));
            let lung = dir.join(format!("t{t}_lung.nii"));
            let path = dir.join(format!("t{t}_pathology.nii"));
            io::write_hu(&ct, &tp.ct)?;
            io::write_volume(&lung, &tp.lung_mask)?;
            io::write_volume(&path, tp.pathology.as_ref().expect("phantoms carry pathology"))?;
            let disp = ps.displacements.get(t).map(|d| -> Result<PathBuf> {
                let p = dir.join(format!("t{t}_to_t{}_displacement.nii", t + 1));
                io::write_displacement(&p, d)?;
                Ok(p)
            });
            timepoints.push(TimepointEntry {
                timepoint_index: t,
                acquisition_day: tp.acquisition_day,
                ct: relative(&ct, out),
                lung_mask: relative(&lung, out),
                pathology: Some(relative(&path, out)),
                displacement_to_next: disp.transpose()?.map(|p| relative(&p, out)),
            });
        }
        entries.push(StudyEntry {
            patient_id: ps.study.patient_id().to_string(),
            split: Some(cfg.split_of(index)),
            timepoints,
        });
    }
    let manifest = StudyManifest::new(entries);
    manifest.save(out.join(MANIFEST_NAME))?;
    Ok(manifest)
}
