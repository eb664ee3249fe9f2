//! Synthetic susceptibility phantoms and simulated acquisitions.
//!
//! Positions are in millimetres with voxel `(i, j, k)` centred at
//! `(i·vx, j·vy, k·vz)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dipole::{dipole_kernel, Orientation};
use crate::error::{QsmError, Result};
use crate::proxnet::TrainPair;
use crate::volume::{separable_filter, Edge, GridSpec, RealVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
        delta_chi: f64,
    },
    /// Infinite cylinder through `point` along `axis`.
    Cylinder {
        point: [f64; 3],
        axis: [f64; 3],
        radius: f64,
        delta_chi: f64,
    },
}

impl Shape {
    fn validate(&self, grid: &GridSpec) -> Result<()> {
        let extent = [0, 1, 2].map(|a| (grid.dims[a] - 1) as f64 * grid.voxel_size[a]);
        let bad = |msg: String| Err(QsmError::InvalidConfig(msg));
        match self {
            Shape::Sphere {
                center,
                radius,
                delta_chi,
            } => {
                if !(radius.is_finite() && *radius > 0.0) || !delta_chi.is_finite() {
                    return bad(format!("sphere radius {radius} or Δχ {delta_chi} invalid"));
                }
                for a in 0..3 {
                    if !(center[a] - radius >= 0.0 && center[a] + radius <= extent[a]) {
                        return bad(format!("sphere at {center:?} with radius {radius} leaves the grid"));
                    }
                }
            }
            Shape::Cylinder {
                point,
                axis,
                radius,
                delta_chi,
            } => {
                if !(radius.is_finite() && *radius > 0.0) || !delta_chi.is_finite() {
                    return bad(format!("cylinder radius {radius} or Δχ {delta_chi} invalid"));
                }
                let n = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(n.is_finite() && n > 0.0) {
                    return bad(format!("cylinder axis {axis:?} has no direction"));
                }
                if (0..3).any(|a| !(0.0..=extent[a]).contains(&point[a])) {
                    return bad(format!("cylinder point {point:?} lies outside the grid"));
                }
            }
        }
        Ok(())
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Sphere { center, radius, .. } => {
                let d2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
                d2 <= radius * radius
            }
            Shape::Cylinder {
                point, axis, radius, ..
            } => {
                let n = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
                let u = axis.map(|v| v / n);
                let d = [0, 1, 2].map(|a| p[a] - point[a]);
                let along: f64 = (0..3).map(|a| d[a] * u[a]).sum();
                let d2: f64 = d.iter().map(|v| v * v).sum::<f64>() - along * along;
                d2 <= radius * radius
            }
        }
    }

    fn delta_chi(&self) -> f64 {
        match self {
            Shape::Sphere { delta_chi, .. } | Shape::Cylinder { delta_chi, .. } => *delta_chi,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid: GridSpec,
    pub shapes: Vec<Shape>,
    #[serde(default)]
    pub background_chi: f64,
    /// Gaussian smoothing of the boundaries, standard deviation in mm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smooth_sigma: Option<f64>,
    /// Sub-samples per voxel and axis; each voxel holds the fraction of its
    /// sub-samples inside a shape. 1 samples voxel centres only.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
}

fn default_supersample() -> usize {
    4
}

impl PhantomSpec {
    pub fn new(grid: GridSpec, shapes: Vec<Shape>) -> Self {
        PhantomSpec {
            grid,
            shapes,
            background_chi: 0.0,
            smooth_sigma: None,
            supersample: default_supersample(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !self.background_chi.is_finite() {
            return Err(QsmError::InvalidConfig(
                "background susceptibility must be finite".into(),
            ));
        }
        if self.supersample == 0 {
            return Err(QsmError::InvalidConfig(
                "supersampling factor must be at least 1".into(),
            ));
        }
        if let Some(s) = self.smooth_sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(QsmError::InvalidConfig(format!(
                    "smoothing sigma must be positive, got {s}"
                )));
            }
        }
        self.shapes.iter().try_for_each(|s| s.validate(&self.grid))
    }
}

/// Rasterizes the phantom with partial-volume weights, optionally smooths
/// it, and subtracts the grid mean.
pub fn make_phantom(spec: &PhantomSpec) -> Result<RealVolume> {
    spec.validate()?;
    let g = spec.grid;
    let ss = spec.supersample;
    let offsets: Vec<f64> = (0..ss).map(|t| (t as f64 + 0.5) / ss as f64 - 0.5).collect();
    let weight = 1.0 / (ss * ss * ss) as f64;
    let mut v = RealVolume::from_fn(g, |i, j, k| {
        let c = g.coords_mm(i, j, k);
        let mut value = spec.background_chi;
        for shape in &spec.shapes {
            let mut hits = 0usize;
            for oz in &offsets {
                for oy in &offsets {
                    for ox in &offsets {
                        let p = [
                            c[0] + ox * g.voxel_size[0],
                            c[1] + oy * g.voxel_size[1],
                            c[2] + oz * g.voxel_size[2],
                        ];
                        hits += shape.contains(p) as usize;
                    }
                }
            }
            if hits > 0 {
                value += shape.delta_chi() * hits as f64 * weight;
            }
        }
        value
    });
    if let Some(sigma) = spec.smooth_sigma {
        v = gaussian_smooth(&v, sigma);
    }
    let mean = v.mean();
    Ok(v.map(|x| x - mean))
}

/// Separable Gaussian blur with standard deviation `sigma_mm`, truncated at
/// 4σ and at the grid edge.
pub fn gaussian_smooth(v: &RealVolume, sigma_mm: f64) -> RealVolume {
    let g = v.grid();
    let taps: Vec<Vec<f64>> = (0..3)
        .map(|a| {
            let s = sigma_mm / g.voxel_size[a];
            let r = (4.0 * s).ceil() as isize;
            (-r..=r).map(|t| (-(t * t) as f64 / (2.0 * s * s)).exp()).collect()
        })
        .collect();
    let out = separable_filter(v.data(), g.dims, [&taps[0], &taps[1], &taps[2]], Edge::Truncate);
    RealVolume::from_parts(*g, out)
}

/// Indicator of an axis-aligned ellipsoid (centre and semi-axes in mm).
pub fn ellipsoid_mask(grid: GridSpec, center: [f64; 3], semi_axes: [f64; 3]) -> Result<RealVolume> {
    if semi_axes.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(QsmError::InvalidConfig(format!(
            "ellipsoid semi-axes {semi_axes:?} must be positive"
        )));
    }
    Ok(RealVolume::from_fn(grid, |i, j, k| {
        let p = grid.coords_mm(i, j, k);
        let q: f64 = (0..3).map(|a| ((p[a] - center[a]) / semi_axes[a]).powi(2)).sum();
        if q <= 1.0 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Uniform direction on the spherical cap of half-angle `max_tilt_deg`
/// about ẑ, drawn from `rng`.
pub fn random_orientation_with(max_tilt_deg: f64, rng: &mut impl Rng) -> Result<Orientation> {
    if !(0.0..=90.0).contains(&max_tilt_deg) {
        return Err(QsmError::InvalidConfig(format!(
            "maximum tilt must lie in [0, 90] degrees, got {max_tilt_deg}"
        )));
    }
    let cos_max = max_tilt_deg.to_radians().cos();
    let u: f64 = rng.gen();
    let cos_t = 1.0 - u * (1.0 - cos_max);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.gen::<f64>() * std::f64::consts::TAU;
    Orientation::from_direction([sin_t * phi.cos(), sin_t * phi.sin(), cos_t])
}

/// [`random_orientation_with`] from a generator seeded with `seed`.
pub fn random_orientation(max_tilt_deg: f64, seed: u64) -> Result<Orientation> {
    random_orientation_with(max_tilt_deg, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AcqSpec {
    pub orientations: Vec<Orientation>,
    /// Standard deviation of the additive Gaussian noise, in field units.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Multiplicative {0, 1} mask applied to every simulated field.
    #[serde(skip)]
    pub mask: Option<RealVolume>,
}

impl AcqSpec {
    pub fn validate(&self) -> Result<()> {
        if self.orientations.is_empty() {
            return Err(QsmError::InvalidConfig("at least one orientation is required".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(QsmError::InvalidConfig(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        self.orientations.iter().try_for_each(Orientation::validate)
    }
}

/// `yₗ = Φₗx + σ·nₗ`, one field per orientation. The noise for orientation
/// `l` comes from stream `l` of a generator seeded with `acq.seed`.
pub fn simulate_phase(x: &RealVolume, acq: &AcqSpec) -> Result<Vec<RealVolume>> {
    acq.validate()?;
    let grid = *x.grid();
    if let Some(m) = &acq.mask {
        grid.ensure_same(m.grid())?;
    }
    acq.orientations
        .iter()
        .enumerate()
        .map(|(l, o)| {
            let op = dipole_kernel(grid, *o)?;
            let mut y = op.forward(x)?;
            if acq.noise_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(acq.seed);
                rng.set_stream(l as u64);
                let s = acq.noise_sigma;
                let noisy = y
                    .data()
                    .iter()
                    .map(|v| v + s * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                y = RealVolume::from_parts(grid, noisy);
            }
            if let Some(m) = &acq.mask {
                y = RealVolume::from_parts(grid, y.data().iter().zip(m.data()).map(|(a, b)| a * b).collect());
            }
            Ok(y)
        })
        .collect()
}

/// Ranges from which random training phantoms are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomFamily {
    pub grid: GridSpec,
    /// Inclusive range of the number of spheres.
    pub sphere_count: [usize; 2],
    pub radius_mm: [f64; 2],
    pub delta_chi: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smooth_sigma: Option<f64>,
}

impl PhantomFamily {
    /// Two to six spheres of radius 2 to 5 mm with Δχ in ±0.2 ppm.
    pub fn spheres(grid: GridSpec) -> Self {
        PhantomFamily {
            grid,
            sphere_count: [2, 6],
            radius_mm: [2.0, 5.0],
            delta_chi: [-0.2, 0.2],
            smooth_sigma: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let [c0, c1] = self.sphere_count;
        let [r0, r1] = self.radius_mm;
        let [d0, d1] = self.delta_chi;
        let extent = (0..3)
            .map(|a| (self.grid.dims[a] - 1) as f64 * self.grid.voxel_size[a])
            .fold(f64::INFINITY, f64::min);
        if c0 > c1 || !(r0 > 0.0 && r0 <= r1 && 2.0 * r1 < extent) || !(d0.is_finite() && d1.is_finite() && d0 <= d1) {
            return Err(QsmError::InvalidConfig(format!(
                "phantom family ranges are inconsistent: {self:?}"
            )));
        }
        Ok(())
    }

    /// Draws non-overlapping spheres by rejection; gives up on a sphere
    /// after a bounded number of attempts.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<PhantomSpec> {
        self.validate()?;
        let g = self.grid;
        let extent = [0, 1, 2].map(|a| (g.dims[a] - 1) as f64 * g.voxel_size[a]);
        let count = rng.gen_range(self.sphere_count[0]..=self.sphere_count[1]);
        let mut shapes: Vec<Shape> = Vec::with_capacity(count);
        for _ in 0..count {
            for _attempt in 0..100 {
                let radius = rng.gen_range(self.radius_mm[0]..=self.radius_mm[1]);
                let center = [0, 1, 2].map(|a| rng.gen_range(radius..=extent[a] - radius));
                let delta_chi = rng.gen_range(self.delta_chi[0]..=self.delta_chi[1]);
                let clear = shapes.iter().all(|s| match s {
                    Shape::Sphere {
                        center: c, radius: r, ..
                    } => (0..3).map(|a| (c[a] - center[a]).powi(2)).sum::<f64>().sqrt() >= r + radius,
                    Shape::Cylinder { .. } => true,
                });
                if clear {
                    shapes.push(Shape::Sphere {
                        center,
                        radius,
                        delta_chi,
                    });
                    break;
                }
            }
        }
        Ok(PhantomSpec {
            smooth_sigma: self.smooth_sigma,
            ..PhantomSpec::new(g, shapes)
        })
    }
}

/// Acquisition settings for generated training pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcqTemplate {
    pub max_tilt_deg: f64,
    pub noise_sigma: f64,
}

/// One generated pair with the description it came from.
#[derive(Clone, Debug)]
pub struct GeneratedPair {
    pub spec: PhantomSpec,
    pub orientation: Orientation,
    pub pair: TrainPair,
}

/// `n_pairs` random phantoms, each with one simulated field at a random
/// orientation. Pair `i` depends only on `seed` and `i`.
pub fn make_dataset(
    n_pairs: usize,
    family: &PhantomFamily,
    acq: &AcqTemplate,
    seed: u64,
) -> Result<Vec<GeneratedPair>> {
    if n_pairs == 0 {
        return Err(QsmError::InvalidConfig("dataset needs at least one pair".into()));
    }
    family.validate()?;
    (0..n_pairs)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let spec = family.sample(&mut rng)?;
            let orientation = random_orientation_with(acq.max_tilt_deg, &mut rng)?;
            let target = make_phantom(&spec)?;
            let sim = AcqSpec {
                orientations: vec![orientation],
                noise_sigma: acq.noise_sigma,
                seed: rng.gen(),
                mask: None,
            };
            let field = simulate_phase(&target, &sim)?.remove(0);
            let op = dipole_kernel(family.grid, orientation)?;
            Ok(GeneratedPair {
                spec,
                orientation,
                pair: TrainPair::new(field, op, target)?,
            })
        })
        .collect()
}

/// SHA-256 of the grid and samples, for dataset audits.
pub fn volume_digest(v: &RealVolume) -> [u8; 32] {
    let mut h = Sha256::new();
    let g = v.grid();
    for d in g.dims {
        h.update((d as u64).to_le_bytes());
    }
    for s in g.voxel_size {
        h.update(s.to_le_bytes());
    }
    for x in v.data() {
        h.update(x.to_le_bytes());
    }
    h.finalize().into()
}
