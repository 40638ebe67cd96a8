//! Seeded synthetic scored maps with a planted concept region.
//!
//! Object heads put their mass on the planted mask, context heads on a ring
//! of cells at least two cells away from it, and an optional register head
//! adds isolated spikes on top of its context pattern. Concept-absent images
//! keep only the context activations, scaled so that their expected total
//! score matches the concept-present images.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::disentangle::ProbeItem;
use crate::error::{Error, Result};
use crate::io::{GrayImage, Manifest, ProbeSample};
use crate::pipeline::{ImageMaps, LabelledMaps};
use crate::tensor::GridMap;
use crate::vit::ScoredMaps;

/// Per-cell noise half-width, relative to the unit object amplitude.
const NOISE: f64 = 0.1;
const SPIKES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub grid: (usize, usize),
    pub layers: usize,
    pub heads: usize,
    pub object_heads: Vec<(usize, usize)>,
    pub register_head: Option<(usize, usize)>,
    pub planted_mask: GridMap,
    pub probe_samples: usize,
    /// Images per evaluation subset.
    pub eval_samples: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        let mut mask = GridMap::zeros(8, 8);
        for r in 2..6 {
            for c in 2..6 {
                mask.set(r, c, 1.0);
            }
        }
        Self {
            grid: (8, 8),
            layers: 2,
            heads: 4,
            object_heads: vec![(0, 1), (1, 2)],
            register_head: Some((1, 3)),
            planted_mask: mask,
            probe_samples: 16,
            eval_samples: 24,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.planted_mask.dims() != self.grid {
            return Err(Error::Shape(format!(
                "planted mask {:?} vs grid {:?}",
                self.planted_mask.dims(),
                self.grid
            )));
        }
        if self.planted_mask.count_nonzero() == 0 {
            return Err(Error::Invalid("planted mask is empty".into()));
        }
        let in_range = |&(l, h): &(usize, usize)| l < self.layers && h < self.heads;
        if !self.object_heads.iter().all(in_range) {
            return Err(Error::Invalid("object head outside the model".into()));
        }
        if self.object_heads.len() == self.layers * self.heads {
            return Err(Error::Invalid("every head is an object head".into()));
        }
        if let Some(r) = self.register_head {
            if !in_range(&r) || self.object_heads.contains(&r) {
                return Err(Error::Invalid(format!("register head {r:?} is not a context head")));
            }
        }
        if self.context_region().count_nonzero() == 0 {
            return Err(Error::Invalid("no cells lie two or more cells from the mask".into()));
        }
        if self.probe_samples == 0 || self.eval_samples == 0 {
            return Err(Error::Invalid("sample counts must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn is_object_head(&self, l: usize, h: usize) -> bool {
        self.object_heads.contains(&(l, h))
    }

    /// Cells at Chebyshev distance ≥ 2 from every mask cell.
    pub fn context_region(&self) -> GridMap {
        let (rows, cols) = self.grid;
        let m = &self.planted_mask;
        let mut out = GridMap::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let near = (r.saturating_sub(1)..(r + 2).min(rows))
                    .any(|y| (c.saturating_sub(1)..(c + 2).min(cols)).any(|x| m.get(y, x) != 0.0));
                out.set(r, c, if near { 0.0 } else { 1.0 });
            }
        }
        out
    }
}

/// How a concept shows up in one image.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Pattern {
    Present,
    Absent,
    /// A faint uniform response on every head.
    Weak,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub seed: u64,
    pub model_id: String,
    pub spec: FixtureSpec,
    pub concepts: Vec<String>,
    pub probe: Vec<LabelledMaps>,
    pub eval: Vec<LabelledMaps>,
}

struct Generator<'a> {
    spec: &'a FixtureSpec,
    rng: ChaCha8Rng,
    context: GridMap,
    context_boost: f64,
    model_id: String,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a FixtureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let context = spec.context_region();
        let n_object = spec.object_heads.len() as f64;
        let n_context = (spec.layers * spec.heads) as f64 - n_object;
        let mask_cells = spec.planted_mask.count_nonzero() as f64;
        let ring_cells = context.count_nonzero() as f64;
        Ok(Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
            context_boost: 1.0 + mask_cells * n_object / (ring_cells * n_context),
            context,
            model_id: format!("fixture-{seed}"),
        })
    }

    fn scored(&mut self, concept: &str, pattern: Pattern) -> Result<ScoredMaps> {
        let spec = self.spec;
        let (rows, cols) = spec.grid;
        let n = rows * cols;
        let (object_amp, context_amp, floor) = match pattern {
            Pattern::Present => (self.rng.gen_range(0.6..1.4), self.rng.gen_range(0.6..1.4), 0.0),
            Pattern::Absent => (0.0, self.context_boost * self.rng.gen_range(0.6..1.4), 0.0),
            Pattern::Weak => (0.0, 0.0, self.rng.gen_range(0.02..0.06)),
        };
        let mut a = Vec::with_capacity(spec.layers * spec.heads * (n + 1));
        for l in 0..spec.layers {
            for h in 0..spec.heads {
                a.push(self.rng.gen_range(-0.5f32..0.5));
                let (amp, region) = if spec.is_object_head(l, h) {
                    (object_amp, &spec.planted_mask)
                } else {
                    (context_amp, &self.context)
                };
                let start = a.len();
                for &v in region.values() {
                    let noise = self.rng.gen_range(-NOISE..NOISE);
                    a.push((amp * v + floor + noise) as f32);
                }
                if spec.register_head == Some((l, h)) {
                    for _ in 0..SPIKES {
                        let cell = self.rng.gen_range(0..n);
                        a[start + cell] += self.rng.gen_range(20.0f32..40.0);
                    }
                }
            }
        }
        let eps = self.rng.gen_range(-3.0..3.0);
        ScoredMaps::new(concept, spec.layers, spec.heads, n + 1, a, eps)
    }

    fn sample(
        &mut self,
        id: String,
        class: &str,
        focus: &str,
        patterns: &[(&str, Pattern)],
    ) -> Result<LabelledMaps> {
        let maps = patterns
            .iter()
            .map(|&(c, p)| self.scored(c, p))
            .collect::<Result<_>>()?;
        let present = patterns.iter().any(|&(c, p)| c == focus && p == Pattern::Present);
        Ok(LabelledMaps {
            id,
            class: Some(class.to_string()),
            concept: focus.to_string(),
            present,
            mask: present.then(|| self.spec.planted_mask.clone()),
            maps: ImageMaps {
                model_id: self.model_id.clone(),
                layers: self.spec.layers,
                heads: self.spec.heads,
                grid: self.spec.grid,
                maps,
            },
        })
    }
}

pub const FIXTURE_CONCEPT: &str = "k";
pub const FIXTURE_CLASSES: [&str; 2] = ["c1", "c2"];

/// A detection and segmentation fixture for one concept `k`. The probe set
/// holds k-present images of class `c1`; the evaluation set holds
/// `eval_samples` k-present `c1` images, k-absent `c1` images and `c2`
/// images with a weak uniform response, in that order.
pub fn generate_fixture(seed: u64, spec: &FixtureSpec) -> Result<Fixture> {
    let mut g = Generator::new(spec, seed)?;
    let k = FIXTURE_CONCEPT;
    let [c1, c2] = FIXTURE_CLASSES;
    let probe = (0..spec.probe_samples)
        .map(|i| g.sample(format!("probe-{i:03}"), c1, k, &[(k, Pattern::Present)]))
        .collect::<Result<_>>()?;
    let mut eval = Vec::with_capacity(3 * spec.eval_samples);
    for (tag, class, pattern) in [
        ("present", c1, Pattern::Present),
        ("absent", c1, Pattern::Absent),
        ("other", c2, Pattern::Weak),
    ] {
        for i in 0..spec.eval_samples {
            eval.push(g.sample(format!("{tag}-{i:03}"), class, k, &[(k, pattern)])?);
        }
    }
    Ok(Fixture {
        seed,
        model_id: g.model_id.clone(),
        spec: spec.clone(),
        concepts: vec![k.to_string()],
        probe,
        eval,
    })
}

pub const CBM_CONCEPTS: [&str; 2] = ["k0", "k1"];
pub const CBM_CLASSES: [&str; 2] = ["c0", "c1"];

/// A two-class classification fixture with adversarial context: an image
/// of class `cy` shows concept `ky` in place, while the other concept
/// appears only through context activations of the same expected score.
/// Evaluation images alternate between the classes.
pub fn generate_cbm_fixture(seed: u64, spec: &FixtureSpec) -> Result<Fixture> {
    let mut g = Generator::new(spec, seed)?;
    let patterns = |y: usize| {
        let mut p = [(CBM_CONCEPTS[0], Pattern::Absent), (CBM_CONCEPTS[1], Pattern::Absent)];
        p[y].1 = Pattern::Present;
        p
    };
    let mut probe = Vec::with_capacity(spec.probe_samples);
    for i in 0..spec.probe_samples {
        let y = i % 2;
        probe.push(g.sample(format!("probe-{i:03}"), CBM_CLASSES[y], CBM_CONCEPTS[y], &patterns(y))?);
    }
    let mut eval = Vec::with_capacity(2 * spec.eval_samples);
    for i in 0..2 * spec.eval_samples {
        let y = i % 2;
        eval.push(g.sample(format!("img-{i:03}"), CBM_CLASSES[y], CBM_CONCEPTS[y], &patterns(y))?);
    }
    Ok(Fixture {
        seed,
        model_id: g.model_id.clone(),
        spec: spec.clone(),
        concepts: CBM_CONCEPTS.map(String::from).to_vec(),
        probe,
        eval,
    })
}

/// Layout facts written next to a fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureInfo {
    pub seed: u64,
    pub model_id: String,
    pub grid: (usize, usize),
    pub layers: usize,
    pub heads: usize,
    pub object_heads: Vec<(usize, usize)>,
    pub register_head: Option<(usize, usize)>,
    pub concepts: Vec<String>,
    pub probe_manifest: String,
    pub eval_manifest: String,
}

impl Fixture {
    pub fn probe_items(&self) -> Result<Vec<ProbeItem>> {
        self.probe
            .iter()
            .filter(|s| s.present)
            .map(|s| {
                Ok(ProbeItem {
                    maps: s.maps.head_maps(&s.concept)?,
                    mask: s.mask.clone().expect("present samples carry masks"),
                })
            })
            .collect()
    }

    pub fn info(&self) -> FixtureInfo {
        FixtureInfo {
            seed: self.seed,
            model_id: self.model_id.clone(),
            grid: self.spec.grid,
            layers: self.spec.layers,
            heads: self.spec.heads,
            object_heads: self.spec.object_heads.clone(),
            register_head: self.spec.register_head,
            concepts: self.concepts.clone(),
            probe_manifest: "probe.json".into(),
            eval_manifest: "eval.json".into(),
        }
    }

    /// Writes `maps/*.json`, `masks/*.pgm`, `probe.json`, `eval.json` and
    /// `fixture.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["maps", "masks"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let write_set = |samples: &[LabelledMaps], prefix: &str| -> Result<Manifest> {
            let mut out = Vec::with_capacity(samples.len());
            for s in samples {
                let name = format!("{prefix}{}", s.id);
                let maps = PathBuf::from("maps").join(format!("{name}.json"));
                s.maps.save(dir.join(&maps))?;
                let mask = match &s.mask {
                    Some(m) => {
                        let p = PathBuf::from("masks").join(format!("{name}.pgm"));
                        GrayImage::from_binary_grid(m).write(dir.join(&p))?;
                        Some(p)
                    }
                    None => None,
                };
                out.push(ProbeSample {
                    image: maps,
                    concept: s.concept.clone(),
                    mask,
                    class: s.class.clone(),
                    present: s.present,
                });
            }
            Ok(Manifest {
                grid: self.spec.grid,
                samples: out,
            })
        };
        let info = self.info();
        for (name, manifest) in [
            (&info.probe_manifest, write_set(&self.probe, "")?),
            (&info.eval_manifest, write_set(&self.eval, "eval-")?),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, manifest.to_json()).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join("fixture.json");
        let text = serde_json::to_string_pretty(&info).expect("fixture info serializes");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}
