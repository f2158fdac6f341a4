//! Synthetic dataset generation: ellipsoidal "organs" with per-class
//! intensity gradients on a noisy background, wrapped in a zero border so
//! the cropping stage has work to do. Every end-to-end test runs on data
//! from this module; no external images are required.
//!
//! The standard dataset is shaped so that the whole planning ladder
//! triggers: anisotropic spacing (slice axis), a voxel count just past the
//! two-stage threshold (cascade), and single-component foreground classes
//! (postprocessing). The rigged mini dataset additionally paints a decoy
//! intensity blob into the image only, so an intensity-window predictor
//! produces a spurious component that postprocessing must remove.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// One ellipsoidal foreground structure. Intensity runs linearly from
/// `intensity.0` at the boundary to `intensity.1` at the center.
#[derive(Debug, Clone)]
pub struct OrganSpec {
    pub class: u8,
    /// Center as a fraction of the interior extent per axis.
    pub center_frac: [f64; 3],
    /// Radii as fractions of the interior extent per axis.
    pub radii_frac: [f64; 3],
    pub intensity: (f64, f64),
}

/// An image-only blob (no label) used to plant a spurious component.
#[derive(Debug, Clone)]
pub struct DecoySpec {
    pub center_frac: [f64; 3],
    pub radii_frac: [f64; 3],
    pub intensity: f32,
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub name: String,
    pub modality: String,
    pub num_cases: usize,
    pub seed: u64,
    /// Nonzero interior extent before the zero border is added.
    pub interior: [usize; 3],
    /// Zero border thickness on each side, per axis.
    pub margin: [usize; 3],
    pub spacing: [f64; 3],
    /// Background intensity range (must exclude zero so cropping is exact).
    pub background: (f32, f32),
    pub organs: Vec<OrganSpec>,
    pub decoy: Option<DecoySpec>,
}

impl SynthSpec {
    /// The bundled 10-case dataset: anisotropic CT-style volumes large
    /// enough to require the two-stage model.
    pub fn standard(seed: u64) -> Self {
        SynthSpec {
            name: "synth-standard".to_string(),
            modality: "CT".to_string(),
            num_cases: 10,
            seed,
            interior: [64, 352, 352],
            margin: [2, 4, 4],
            spacing: [4.0, 1.0, 1.0],
            background: (10.0, 30.0),
            organs: vec![
                OrganSpec {
                    class: 1,
                    center_frac: [0.5, 0.3, 0.3],
                    radii_frac: [0.22, 0.085, 0.085],
                    intensity: (80.0, 120.0),
                },
                OrganSpec {
                    class: 2,
                    center_frac: [0.5, 0.7, 0.7],
                    radii_frac: [0.19, 0.075, 0.075],
                    intensity: (150.0, 200.0),
                },
            ],
            decoy: None,
        }
    }

    /// A small single-organ dataset whose images carry an unlabeled decoy
    /// blob with organ-like intensity: an intensity-window predictor marks
    /// it foreground, and largest-component postprocessing must strictly
    /// improve dice by deleting it.
    pub fn rigged_mini(seed: u64) -> Self {
        SynthSpec {
            name: "synth-rigged-mini".to_string(),
            modality: "CT".to_string(),
            num_cases: 10,
            seed,
            interior: [16, 48, 48],
            margin: [1, 2, 2],
            spacing: [2.5, 1.0, 1.0],
            background: (10.0, 30.0),
            organs: vec![OrganSpec {
                class: 1,
                center_frac: [0.5, 0.4, 0.4],
                radii_frac: [0.3, 0.19, 0.19],
                intensity: (80.0, 120.0),
            }],
            // constant intensity inside the organ's interquartile window
            decoy: Some(DecoySpec {
                center_frac: [0.5, 0.78, 0.78],
                radii_frac: [0.13, 0.085, 0.085],
                intensity: 89.0,
            }),
        }
    }

    pub fn num_classes(&self) -> usize {
        1 + self.organs.iter().map(|o| o.class as usize).max().unwrap_or(0)
    }
}

pub struct SynthCase {
    pub id: String,
    pub image: Volume,
    pub label: Volume,
}

/// Generate one case. Even-numbered cases use the base interior extent so
/// the per-axis lower median of the dataset equals `SynthSpec::interior`;
/// odd-numbered cases are jittered slightly larger.
pub fn generate_case(spec: &SynthSpec, index: usize) -> Result<SynthCase> {
    if spec.num_cases == 0 {
        return Err(Error::validation("synthetic spec lists zero cases"));
    }
    if spec.background.0 <= 0.0 {
        return Err(Error::validation(
            "background intensity must be positive so the zero border is croppable",
        ));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x100000001b3).wrapping_add(index as u64));
    let interior: Vec<usize> = if index % 2 == 0 {
        spec.interior.to_vec()
    } else {
        spec.interior.iter().map(|&e| e + rng.gen_range(0..=3usize)).collect()
    };
    let dims: Vec<usize> =
        (0..3).map(|a| interior[a] + 2 * spec.margin[a]).collect();
    let n: usize = dims.iter().product();
    let mut image = vec![0.0f32; n];
    let mut label = vec![0u8; n];

    // noisy background over the interior; the border stays exactly zero
    for z in 0..interior[0] {
        for y in 0..interior[1] {
            let row = ((z + spec.margin[0]) * dims[1] + (y + spec.margin[1])) * dims[2]
                + spec.margin[2];
            for v in image[row..row + interior[2]].iter_mut() {
                *v = rng.gen_range(spec.background.0..spec.background.1);
            }
        }
    }

    // organs: ellipsoids with a radial intensity ramp
    for organ in &spec.organs {
        let center: Vec<f64> = (0..3)
            .map(|a| {
                let jitter = rng.gen_range(-2.0..=2.0);
                spec.margin[a] as f64 + organ.center_frac[a] * interior[a] as f64 + jitter
            })
            .collect();
        let radii: Vec<f64> = (0..3)
            .map(|a| {
                let jitter = rng.gen_range(-1.0..=1.0);
                (organ.radii_frac[a] * interior[a] as f64 + jitter).max(1.5)
            })
            .collect();
        paint_ellipsoid(&mut image, Some((&mut label, organ.class)), &dims, &center, &radii, |r| {
            (organ.intensity.0 + (organ.intensity.1 - organ.intensity.0) * (1.0 - r)) as f32
        });
    }

    if let Some(decoy) = &spec.decoy {
        let center: Vec<f64> = (0..3)
            .map(|a| spec.margin[a] as f64 + decoy.center_frac[a] * interior[a] as f64)
            .collect();
        let radii: Vec<f64> =
            (0..3).map(|a| (decoy.radii_frac[a] * interior[a] as f64).max(1.5)).collect();
        let intensity = decoy.intensity;
        paint_ellipsoid(&mut image, None, &dims, &center, &radii, |_| intensity);
    }

    let spacing = spec.spacing.to_vec();
    Ok(SynthCase {
        id: format!("case_{index:02}"),
        image: Volume::new_image(1, dims.clone(), spacing.clone(), image)?,
        label: Volume::new_labelmap(dims, spacing, label)?,
    })
}

/// Rasterize an ellipsoid; `shade` maps the normalized radius in [0,1] to
/// an intensity. When a label target is given the voxels are relabeled too.
fn paint_ellipsoid(
    image: &mut [f32],
    mut label: Option<(&mut [u8], u8)>,
    dims: &[usize],
    center: &[f64],
    radii: &[f64],
    shade: impl Fn(f64) -> f32,
) {
    let lo: Vec<usize> = (0..3)
        .map(|a| (center[a] - radii[a]).floor().max(0.0) as usize)
        .collect();
    let hi: Vec<usize> = (0..3)
        .map(|a| ((center[a] + radii[a]).ceil() as usize + 1).min(dims[a]))
        .collect();
    for z in lo[0]..hi[0] {
        let nz = (z as f64 - center[0]) / radii[0];
        for y in lo[1]..hi[1] {
            let ny = (y as f64 - center[1]) / radii[1];
            for x in lo[2]..hi[2] {
                let nx = (x as f64 - center[2]) / radii[2];
                let r2 = nz * nz + ny * ny + nx * nx;
                if r2 <= 1.0 {
                    let v = (z * dims[1] + y) * dims[2] + x;
                    image[v] = shade(r2.sqrt());
                    if let Some((lab, class)) = label.as_mut() {
                        lab[v] = *class;
                    }
                }
            }
        }
    }
}

/// Generate the full dataset tree: `dataset.json`, `imagesTr/*.mvox`,
/// `labelsTr/*.mvox`.
pub fn generate_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<String>> {
    let images = out_dir.join("imagesTr");
    let labels = out_dir.join("labelsTr");
    fs::create_dir_all(&images).map_err(|e| Error::io_at(&images, e))?;
    fs::create_dir_all(&labels).map_err(|e| Error::io_at(&labels, e))?;
    let mut ids = Vec::with_capacity(spec.num_cases);
    let mut training = Vec::with_capacity(spec.num_cases);
    for index in 0..spec.num_cases {
        let case = generate_case(spec, index)?;
        case.image.write_mvox(&images.join(format!("{}.mvox", case.id)))?;
        case.label.write_mvox(&labels.join(format!("{}.mvox", case.id)))?;
        training.push(json!({
            "image": format!("imagesTr/{}.mvox", case.id),
            "label": format!("labelsTr/{}.mvox", case.id),
        }));
        ids.push(case.id);
    }
    let mut label_names = serde_json::Map::new();
    label_names.insert("0".to_string(), json!("background"));
    for organ in &spec.organs {
        label_names
            .insert(organ.class.to_string(), json!(format!("organ_{}", organ.class)));
    }
    let descriptor = json!({
        "name": spec.name,
        "modality": {"0": spec.modality},
        "labels": label_names,
        "numTraining": spec.num_cases,
        "training": training,
    });
    let path = out_dir.join("dataset.json");
    let text = serde_json::to_string_pretty(&descriptor)
        .map_err(|e| Error::validation(format!("descriptor serialization: {e}")))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io_at(&path, e))?;
    Ok(ids)
}
