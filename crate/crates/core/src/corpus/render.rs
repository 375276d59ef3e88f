//! Deterministic procedural corpus.
//!
//! Every image is drawn on a 16x16 lattice of cells (upscaled to the
//! configured side) from its sampled annotation:
//!
//! * protest: a band of dark "heads" along the bottom rows; non-protest scenes
//!   get a sparser band, so crowd density separates the classes;
//! * violence: a red glow over the top rows whose strength grows with the score;
//! * attributes: one glyph each (`group_*` raise crowd density/extent, `night`
//!   darkens the scene);
//! * demographics: color codes in a fixed top-right region.
//!
//! Record `i` draws from streams derived from `(seed, i)` only, so generation
//! is order independent.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use synthaudit_nn::seed;

use super::{
    write_corpus, AnnotationVector, Demographics, Image, ImageRecord, Sensitive, Split,
    AGE_BUCKETS, GENDERS, N_ATTRIBUTES, RACES,
};
use crate::error::{Error, Result};

const LATTICE: usize = 16;

/// Shifts the protest prior for members of one demographic group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupShift {
    pub attribute: Sensitive,
    pub category: usize,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPriors {
    pub protest: f64,
    /// Presence rates of the visual attributes among protest images.
    pub attributes: [f64; N_ATTRIBUTES],
}

impl Default for ClassPriors {
    fn default() -> Self {
        Self {
            protest: 0.3,
            attributes: [0.75, 0.1, 0.1, 0.2, 0.1, 0.5, 0.25, 0.2, 0.15, 0.15],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemographicPriors {
    pub age: Vec<f64>,
    pub gender: Vec<f64>,
    pub race: Vec<f64>,
}

impl Default for DemographicPriors {
    fn default() -> Self {
        Self {
            age: vec![0.02, 0.05, 0.13, 0.3, 0.22, 0.13, 0.08, 0.05, 0.02],
            gender: vec![0.5, 0.5],
            race: vec![0.3, 0.15, 0.15, 0.1, 0.1, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProceduralSpec {
    pub n_total: usize,
    pub side: usize,
    pub seed: u64,
    pub split_seed: u64,
    pub test_fraction: f64,
    pub class_priors: ClassPriors,
    /// `None` produces a corpus without demographic columns.
    pub demographic_priors: Option<DemographicPriors>,
    pub protest_shifts: Vec<GroupShift>,
}

impl Default for ProceduralSpec {
    fn default() -> Self {
        Self {
            n_total: 2500,
            side: 32,
            seed: 0,
            split_seed: 1,
            test_fraction: 0.2,
            class_priors: ClassPriors::default(),
            demographic_priors: Some(DemographicPriors::default()),
            protest_shifts: Vec::new(),
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(
            name,
            format!("probability {p} outside [0, 1]"),
        ));
    }
    Ok(())
}

fn check_categorical(name: &str, ps: &[f64], len: usize) -> Result<()> {
    if ps.len() != len {
        return Err(Error::config(
            name,
            format!("expected {len} probabilities, got {}", ps.len()),
        ));
    }
    for (i, &p) in ps.iter().enumerate() {
        check_prob(&format!("{name}[{i}]"), p)?;
    }
    let s: f64 = ps.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::config(
            name,
            format!("probabilities sum to {s}, not 1"),
        ));
    }
    Ok(())
}

impl ProceduralSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_total < 10 {
            return Err(Error::config("corpus.n_total", "must be at least 10"));
        }
        if self.side < LATTICE || self.side % LATTICE != 0 {
            return Err(Error::config(
                "corpus.side",
                format!("must be a positive multiple of {LATTICE}"),
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("corpus.test_fraction", "must lie in [0, 1)"));
        }
        check_prob("corpus.class_priors.protest", self.class_priors.protest)?;
        for (i, &p) in self.class_priors.attributes.iter().enumerate() {
            check_prob(&format!("corpus.class_priors.attributes[{i}]"), p)?;
        }
        if let Some(d) = &self.demographic_priors {
            check_categorical("corpus.demographic_priors.age", &d.age, AGE_BUCKETS.len())?;
            check_categorical("corpus.demographic_priors.gender", &d.gender, GENDERS.len())?;
            check_categorical("corpus.demographic_priors.race", &d.race, RACES.len())?;
        }
        for (i, s) in self.protest_shifts.iter().enumerate() {
            if self.demographic_priors.is_none() {
                return Err(Error::config(
                    format!("corpus.protest_shifts[{i}]"),
                    "shifts need demographic priors",
                ));
            }
            if s.category >= s.attribute.categories().len() {
                return Err(Error::config(
                    format!("corpus.protest_shifts[{i}].category"),
                    "category out of range",
                ));
            }
        }
        Ok(())
    }

    /// Split of record `index`, a keyed permutation of indices so exactly
    /// `round(test_fraction * n_total)` records land in the test split.
    pub fn split_for(&self, index: usize) -> Split {
        let n = self.n_total as u128;
        let n_test = (self.test_fraction * self.n_total as f64).round() as u128;
        let mut a = (seed::derive(self.split_seed, "split-a", 0) as u128 % n).max(1);
        while gcd(a, n) != 1 {
            a = a % n + 1;
        }
        let b = seed::derive(self.split_seed, "split-b", 0) as u128 % n;
        if (a * index as u128 + b) % n < n_test {
            Split::Test
        } else {
            Split::Train
        }
    }

    pub fn record_id(index: usize) -> String {
        format!("img-{index:06}")
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn categorical(rng: &mut ChaCha8Rng, ps: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in ps.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    ps.len() - 1
}

fn sample_annotation(spec: &ProceduralSpec, index: usize) -> AnnotationVector {
    let mut rng = seed::rng(spec.seed, "corpus-label", index as u64);
    let demographics = spec.demographic_priors.as_ref().map(|d| Demographics {
        age_bucket: categorical(&mut rng, &d.age) as u8,
        gender: categorical(&mut rng, &d.gender) as u8,
        race: categorical(&mut rng, &d.race) as u8,
    });
    let mut p = spec.class_priors.protest;
    if let Some(d) = demographics {
        for s in &spec.protest_shifts {
            if d.get(s.attribute) == s.category {
                p += s.delta;
            }
        }
    }
    let p = p.clamp(0.0, 1.0);
    let protest = rng.random::<f64>() < p;
    // consume the same number of draws either way
    let u_violence: f64 = rng.random();
    let u_attrs: [f64; N_ATTRIBUTES] = std::array::from_fn(|_| rng.random());
    if !protest {
        return AnnotationVector::negative(demographics);
    }
    let violence = u_violence.powf(1.5);
    let attributes = std::array::from_fn(|j| u_attrs[j] < spec.class_priors.attributes[j]);
    AnnotationVector {
        protest,
        violence,
        attributes,
        demographics,
    }
}

struct Canvas {
    cells: Vec<[f32; 3]>,
}

impl Canvas {
    fn blend(&mut self, x: i32, y: i32, color: [f32; 3], alpha: f32) {
        if !(0..LATTICE as i32).contains(&x) || !(0..LATTICE as i32).contains(&y) {
            return;
        }
        let c = &mut self.cells[y as usize * LATTICE + x as usize];
        for k in 0..3 {
            c[k] = c[k] * (1.0 - alpha) + color[k] * alpha;
        }
    }

    fn rect(&mut self, x: i32, y: i32, w: i32, h: i32, color: [f32; 3], alpha: f32) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.blend(xx, yy, color, alpha);
            }
        }
    }
}

const RACE_COLORS: [[f32; 3]; 7] = [
    [0.95, 0.95, 0.95],
    [0.1, 0.1, 0.1],
    [0.9, 0.5, 0.1],
    [0.9, 0.9, 0.2],
    [0.3, 0.8, 0.3],
    [0.6, 0.2, 0.7],
    [0.2, 0.7, 0.8],
];
const GENDER_COLORS: [[f32; 3]; 2] = [[0.15, 0.25, 0.95], [0.95, 0.25, 0.35]];

/// Draws `annotation` with randomness from `rng`.
pub(crate) fn render(annotation: &AnnotationVector, side: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut cv = Canvas {
        cells: vec![[0.0; 3]; LATTICE * LATTICE],
    };
    let has = |j: usize| annotation.protest && annotation.attributes[j];

    // background: vertical gradient around a random base color
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.4..0.7));
    let night = if has(8) { 0.45 } else { 1.0 };
    for y in 0..LATTICE {
        let f = 1.1 - 0.25 * y as f32 / (LATTICE - 1) as f32;
        for x in 0..LATTICE {
            cv.cells[y * LATTICE + x] = std::array::from_fn(|k| (base[k] * f * night).min(1.0));
        }
    }

    // crowd band
    let mut density: f32 = if annotation.protest {
        rng.random_range(0.22..0.55)
    } else {
        rng.random_range(0.0..0.24)
    };
    if has(5) {
        density += 0.12;
    }
    if has(6) {
        density += 0.18;
    }
    let top = if has(6) { 8 } else { 10 };
    for y in top..LATTICE as i32 {
        for x in 0..LATTICE as i32 {
            let u: f32 = rng.random();
            let shade: f32 = rng.random_range(0.03..0.2);
            if u < density {
                cv.blend(x, y, [shade, shade * 0.9, shade * 0.8], 1.0);
            }
        }
    }

    // violence glow
    if annotation.protest {
        let noise = Normal::new(0.0, 0.07).unwrap();
        let v = (annotation.violence as f32 + noise.sample(rng) as f32).clamp(0.0, 1.0);
        for y in 0..5 {
            let w = v * (1.0 - y as f32 / 5.0);
            for x in 0..LATTICE {
                let c = &mut cv.cells[y * LATTICE + x];
                c[0] = (c[0] + 0.55 * w).min(1.0);
                c[1] = (c[1] - 0.3 * w).max(0.0);
                c[2] = (c[2] - 0.3 * w).max(0.0);
            }
        }
    }

    let jitter = |rng: &mut ChaCha8Rng| (rng.random_range(-1..=1), rng.random_range(-1..=1));
    let glyph = |cv: &mut Canvas,
                 rng: &mut ChaCha8Rng,
                 present: bool,
                 draw: &dyn Fn(&mut Canvas, i32, i32, f32)| {
        // draws are consumed whether or not the glyph is present
        let (dx, dy) = jitter(rng);
        let alpha: f32 = rng.random_range(0.35..1.0);
        if present {
            draw(cv, dx, dy, alpha);
        }
    };
    let sign_x: i32 = rng.random_range(1..10);
    let distract_sign = !annotation.protest && rng.random::<f32>() < 0.15;
    let distract_flag = !annotation.protest && rng.random::<f32>() < 0.08;
    glyph(&mut cv, rng, has(0) || distract_sign, &|cv, dx, dy, a| {
        cv.rect(sign_x + dx, 6 + dy, 3, 2, [0.97, 0.97, 0.92], a)
    });
    glyph(&mut cv, rng, has(1), &|cv, dx, dy, a| {
        cv.rect(2 + dx, 3 + dy, 2, 2, [0.55, 0.33, 0.15], a)
    });
    glyph(&mut cv, rng, has(2), &|cv, dx, dy, a| {
        cv.rect(7 + dx, 6 + dy, 2, 3, [1.0, 0.5, 0.0], a)
    });
    glyph(&mut cv, rng, has(3), &|cv, dx, dy, a| {
        cv.rect(11 + dx, 8 + dy, 2, 2, [0.05, 0.1, 0.55], a)
    });
    let kid_xs: [i32; 3] = std::array::from_fn(|_| rng.random_range(0..LATTICE as i32));
    glyph(&mut cv, rng, has(4), &|cv, _, dy, a| {
        for (i, &x) in kid_xs.iter().enumerate() {
            cv.blend(x, 14 + (i as i32 % 2) + dy.min(0), [1.0, 0.92, 0.1], a);
        }
    });
    glyph(&mut cv, rng, has(7) || distract_flag, &|cv, dx, dy, a| {
        cv.rect(4 + dx, 2 + dy, 3, 1, [0.85, 0.1, 0.1], a);
        cv.rect(4 + dx, 3 + dy, 3, 1, [0.1, 0.3, 0.85], a);
    });
    glyph(&mut cv, rng, has(9), &|cv, dx, dy, a| {
        cv.rect(13 + dx, 5 + dy, 1, 2, [0.9, 0.1, 0.8], a)
    });

    if let Some(d) = annotation.demographics {
        let race = RACE_COLORS[d.race as usize];
        let gender = GENDER_COLORS[d.gender as usize];
        let age = (d.age_bucket as f32 + 1.0) / 10.0;
        cv.rect(12, 0, 2, 2, race, 1.0);
        cv.rect(14, 0, 1, 2, gender, 1.0);
        cv.rect(15, 0, 1, 2, [age, age, age], 1.0);
    }

    let cell = side / LATTICE;
    let noise = Normal::new(0.0f32, 0.025).unwrap();
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let c = cv.cells[(y / cell) * LATTICE + x / cell];
            for v in c {
                data.push((v + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    Image { side, data }.quantized()
}

/// Renders the corpus in memory.
pub fn render_corpus(spec: &ProceduralSpec) -> Result<Vec<ImageRecord>> {
    spec.validate()?;
    Ok((0..spec.n_total)
        .into_par_iter()
        .map(|i| {
            let annotation = sample_annotation(spec, i);
            let mut rng = seed::rng(spec.seed, "corpus-render", i as u64);
            ImageRecord {
                id: ProceduralSpec::record_id(i),
                image: render(&annotation, spec.side, &mut rng),
                annotation,
                split: spec.split_for(i),
            }
        })
        .collect())
}

/// Renders the corpus and writes `manifest.csv` plus PNG files under `out_dir`.
pub fn generate_corpus(spec: &ProceduralSpec, out_dir: &Path) -> Result<Vec<ImageRecord>> {
    let records = render_corpus(spec)?;
    write_corpus(&records, out_dir)?;
    Ok(records)
}
