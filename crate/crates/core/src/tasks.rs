//! Episodes, class-disjoint dataset splits, episode sampling and the
//! procedurally generated texture datasets used for desk-scale runs.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Generated,
    Interpolated,
}

/// Where an episode-local class came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassOrigin {
    /// A global class id, plus the pool model that synthesised it if any.
    Class {
        class_id: usize,
        source_model: Option<usize>,
    },
    /// A blend of two classes at a hidden layer.
    Mixed {
        first: usize,
        second: usize,
        layer: usize,
        lambda: f64,
    },
}

impl ClassOrigin {
    pub fn real(class_id: usize) -> Self {
        ClassOrigin::Class {
            class_id,
            source_model: None,
        }
    }

    /// Global class id of an unmixed origin.
    pub fn class_id(&self) -> Option<usize> {
        match self {
            ClassOrigin::Class { class_id, .. } => Some(*class_id),
            ClassOrigin::Mixed { .. } => None,
        }
    }
}

/// An N-way episode. Images are NCHW; labels are episode-local `0..n_way`.
/// Examples are grouped by class in label order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub support_x: Array,
    pub support_y: Vec<usize>,
    pub query_x: Array,
    pub query_y: Vec<usize>,
    pub n_way: usize,
    pub class_origin: Vec<ClassOrigin>,
    pub provenance: Provenance,
    pub source_model: Option<usize>,
}

impl Episode {
    /// Checks the structural invariants: equal per-class counts, dense labels,
    /// one shared image shape.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(format!("malformed episode: {m}")));
        if self.class_origin.len() != self.n_way {
            return bad(format!(
                "{} class origins for {}-way",
                self.class_origin.len(),
                self.n_way
            ));
        }
        if self.support_x.rows() != self.support_y.len() || self.query_x.rows() != self.query_y.len() {
            return bad("label count differs from example count".into());
        }
        if self.support_x.shape.len() != 4
            || (self.query_x.numel() > 0 && self.query_x.shape[1..] != self.support_x.shape[1..])
        {
            return bad("support and query image shapes differ".into());
        }
        for (name, ys) in [("support", &self.support_y), ("query", &self.query_y)] {
            let mut counts = vec![0usize; self.n_way];
            for &y in ys {
                if y >= self.n_way {
                    return bad(format!("{name} label {y} outside 0..{}", self.n_way));
                }
                counts[y] += 1;
            }
            if counts.windows(2).any(|w| w[0] != w[1]) {
                return bad(format!("{name} per-class counts differ: {counts:?}"));
            }
            if name == "support" && counts.contains(&0) {
                return bad("a class has no support examples".into());
            }
        }
        Ok(())
    }

    pub fn k_shot(&self) -> usize {
        self.support_y.len() / self.n_way.max(1)
    }

    pub fn k_query(&self) -> usize {
        self.query_y.len() / self.n_way.max(1)
    }

    /// (C, H, W) of the images.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = &self.support_x.shape;
        [s[1], s[2], s[3]]
    }

    /// Rows of class `c` in the support set.
    pub fn support_rows(&self, c: usize) -> Vec<usize> {
        rows_of(&self.support_y, c)
    }

    pub fn query_rows(&self, c: usize) -> Vec<usize> {
        rows_of(&self.query_y, c)
    }
}

fn rows_of(labels: &[usize], c: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y == c)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl Role {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "meta_train" | "train" => Ok(Role::MetaTrain),
            "meta_val" | "val" => Ok(Role::MetaVal),
            "meta_test" | "test" => Ok(Role::MetaTest),
            other => Err(Error::Dataset(format!("unknown role `{other}`"))),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::MetaTrain => "meta_train",
            Role::MetaVal => "meta_val",
            Role::MetaTest => "meta_test",
        })
    }
}

/// The classes of one role of a dataset. Each class holds an NCHW array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    pub role: Role,
    pub image_shape: [usize; 3],
    pub classes: BTreeMap<usize, Array>,
    pub class_names: BTreeMap<usize, String>,
}

impl DatasetSplit {
    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.keys().copied().collect()
    }

    pub fn examples(&self, class_id: usize) -> Option<&Array> {
        self.classes.get(&class_id)
    }

    pub fn class_label(&self, class_id: usize) -> String {
        self.class_names
            .get(&class_id)
            .cloned()
            .unwrap_or_else(|| format!("class {class_id}"))
    }

    /// Fails when the split cannot supply `n_way`-way episodes of `per_class` examples.
    pub fn check_capacity(&self, n_way: usize, per_class: usize) -> Result<()> {
        if self.classes.len() < n_way {
            return Err(Error::Dataset(format!(
                "{} split `{}` has {} classes, {n_way} needed",
                self.role,
                self.name,
                self.classes.len()
            )));
        }
        for (&id, arr) in &self.classes {
            if arr.rows() < per_class {
                return Err(Error::Dataset(format!(
                    "{} in split `{}` has {} examples, {per_class} needed",
                    self.class_label(id),
                    self.name,
                    arr.rows()
                )));
            }
        }
        Ok(())
    }
}

/// The three class-disjoint roles of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetTriple {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl DatasetTriple {
    pub fn validate_disjoint(&self) -> Result<()> {
        let sets: Vec<(Role, BTreeSet<usize>)> = [&self.train, &self.val, &self.test]
            .iter()
            .map(|s| (s.role, s.classes.keys().copied().collect()))
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                if let Some(c) = sets[i].1.intersection(&sets[j].1).next() {
                    return Err(Error::Dataset(format!(
                        "class {} appears in both {} and {}",
                        self.train.class_label(*c),
                        sets[i].0,
                        sets[j].0
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, role: Role) -> &DatasetSplit {
        match role {
            Role::MetaTrain => &self.train,
            Role::MetaVal => &self.val,
            Role::MetaTest => &self.test,
        }
    }
}

/// Samples an N-way K-shot episode with `k_query` query examples per class.
pub fn sample_episode(
    split: &DatasetSplit,
    n_way: usize,
    k_shot: usize,
    k_query: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::InvalidArgument("n_way and k_shot must be positive".into()));
    }
    split.check_capacity(n_way, k_shot + k_query)?;
    let ids = split.class_ids();
    let chosen: Vec<usize> = index::sample(rng, ids.len(), n_way)
        .into_iter()
        .map(|i| ids[i])
        .collect();

    let mut support = Vec::with_capacity(n_way);
    let mut query = Vec::with_capacity(n_way);
    for &cid in &chosen {
        let arr = &split.classes[&cid];
        let picks: Vec<usize> = index::sample(rng, arr.rows(), k_shot + k_query).into_vec();
        support.push(arr.select_rows(&picks[..k_shot]));
        query.push(arr.select_rows(&picks[k_shot..]));
    }
    let [c, h, w] = split.image_shape;
    let query_x = if k_query == 0 {
        Array::zeros(&[0, c, h, w])
    } else {
        Array::concat_rows(&query.iter().collect::<Vec<_>>())?
    };
    Ok(Episode {
        support_x: Array::concat_rows(&support.iter().collect::<Vec<_>>())?,
        support_y: (0..n_way).flat_map(|c| std::iter::repeat_n(c, k_shot)).collect(),
        query_x,
        query_y: (0..n_way).flat_map(|c| std::iter::repeat_n(c, k_query)).collect(),
        n_way,
        class_origin: chosen.into_iter().map(ClassOrigin::real).collect(),
        provenance: Provenance::Real,
        source_model: None,
    })
}

/// Texture family of a synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    /// Oriented colour gratings with a soft blob.
    Waves,
    /// Coloured blobs over a checkerboard. Visually unrelated to `Waves`;
    /// used as the foreign distribution for disguised models.
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub class_separation: f64,
    pub examples_per_class: usize,
    pub family: TextureFamily,
    /// Offset added to class ids, so two datasets can have distinct id ranges.
    pub class_id_offset: usize,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, image_size: usize, channels: usize, examples_per_class: usize) -> Self {
        SyntheticSpec {
            num_classes,
            image_size,
            channels,
            class_separation: 5.0,
            examples_per_class,
            family: TextureFamily::Waves,
            class_id_offset: 0,
        }
    }
}

/// Class counts for the 60/15/25 role partition.
pub fn role_sizes(num_classes: usize) -> (usize, usize, usize) {
    let train = (num_classes as f64 * 0.60).round() as usize;
    let val = (num_classes as f64 * 0.15).round() as usize;
    (train, val, num_classes.saturating_sub(train + val))
}

struct ClassPattern {
    freq: (f64, f64),
    phase: f64,
    base: Vec<f64>,
    amp: Vec<f64>,
    blob: (f64, f64, f64),
    blob_color: Vec<f64>,
    checker: usize,
}

impl ClassPattern {
    fn draw(channels: usize, rng: &mut impl Rng) -> Self {
        let mut v = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let angle = v(0.0, PI);
        let f = v(0.6, 3.0);
        ClassPattern {
            freq: (f * angle.cos(), f * angle.sin()),
            phase: v(0.0, 2.0 * PI),
            base: (0..channels).map(|_| v(0.25, 0.75)).collect(),
            amp: (0..channels).map(|_| v(0.05, 0.25)).collect(),
            blob: (v(0.2, 0.8), v(0.2, 0.8), v(0.12, 0.3)),
            blob_color: (0..channels).map(|_| v(-0.3, 0.3)).collect(),
            checker: 2 + (v(0.0, 4.0) as usize),
        }
    }

    fn render(
        &self,
        family: TextureFamily,
        size: usize,
        jitter: f64,
        noise: &Normal<f64>,
        rng: &mut impl Rng,
    ) -> Vec<f64> {
        let c = self.base.len();
        let j = Normal::new(0.0, jitter).expect("finite jitter");
        let phase = self.phase + j.sample(rng) * 2.0;
        let (bx, by) = (self.blob.0 + j.sample(rng) * 0.3, self.blob.1 + j.sample(rng) * 0.3);
        let gain: Vec<f64> = (0..c).map(|_| 1.0 + j.sample(rng)).collect();
        let s = size as f64;
        let mut img = vec![0.0; c * size * size];
        for y in 0..size {
            for x in 0..size {
                let (u, w) = (x as f64 / s, y as f64 / s);
                let d2 = (u - bx).powi(2) + (w - by).powi(2);
                let bump = (-d2 / (2.0 * self.blob.2 * self.blob.2)).exp();
                for ch in 0..c {
                    let v = match family {
                        TextureFamily::Waves => {
                            let wave = (2.0 * PI * (self.freq.0 * u + self.freq.1 * w) + phase).sin();
                            self.base[ch] + self.amp[ch] * gain[ch] * wave + self.blob_color[ch] * bump
                        }
                        TextureFamily::Blobs => {
                            let cell = (x / self.checker + y / self.checker) % 2;
                            let bg = if cell == 0 { 0.1 } else { 0.3 };
                            bg + (self.base[ch] + 0.3) * gain[ch] * bump
                                + 0.5 * self.amp[ch] * (1.0 - bump) * (phase + u * 3.0).cos()
                        }
                    };
                    img[(ch * size + y) * size + x] = (v + noise.sample(rng)).clamp(0.0, 1.0);
                }
            }
        }
        img
    }
}

/// Builds a three-role texture dataset. Deterministic in `rng`.
pub fn make_synthetic_dataset(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<DatasetTriple> {
    if spec.class_separation <= 0.0 || !spec.class_separation.is_finite() {
        return Err(Error::InvalidArgument("class_separation must be positive".into()));
    }
    if spec.image_size == 0 || spec.channels == 0 || spec.examples_per_class == 0 {
        return Err(Error::InvalidArgument(
            "image_size, channels and examples_per_class must be positive".into(),
        ));
    }
    let (n_train, n_val, n_test) = role_sizes(spec.num_classes);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Dataset(format!(
            "{} classes cannot be split into three disjoint non-empty roles",
            spec.num_classes
        )));
    }
    let jitter = 1.0 / spec.class_separation;
    let noise = Normal::new(0.0, 0.02 + 0.15 / spec.class_separation).expect("finite noise");
    let size = spec.image_size;
    let per_image = spec.channels * size * size;

    let mut order: Vec<usize> = (0..spec.num_classes).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);

    let mut classes = BTreeMap::new();
    for local in 0..spec.num_classes {
        let pattern = ClassPattern::draw(spec.channels, rng);
        let mut data = Vec::with_capacity(spec.examples_per_class * per_image);
        for _ in 0..spec.examples_per_class {
            data.extend(pattern.render(spec.family, size, jitter, &noise, rng));
        }
        let arr = Array::new(vec![spec.examples_per_class, spec.channels, size, size], data)?;
        classes.insert(local + spec.class_id_offset, arr);
    }

    let name = match spec.family {
        TextureFamily::Waves => "synthetic-waves",
        TextureFamily::Blobs => "synthetic-blobs",
    };
    let mut make = |role: Role, ids: &[usize]| DatasetSplit {
        name: name.to_string(),
        role,
        image_shape: [spec.channels, size, size],
        classes: ids
            .iter()
            .map(|&i| {
                let id = i + spec.class_id_offset;
                (id, classes.remove(&id).expect("class generated once"))
            })
            .collect(),
        class_names: ids
            .iter()
            .map(|&i| (i + spec.class_id_offset, format!("{name}-{}", i + spec.class_id_offset)))
            .collect(),
    };
    let triple = DatasetTriple {
        train: make(Role::MetaTrain, &order[..n_train]),
        val: make(Role::MetaVal, &order[n_train..n_train + n_val]),
        test: make(Role::MetaTest, &order[n_train + n_val..]),
    };
    triple.validate_disjoint()?;
    Ok(triple)
}

/// One `class_name,role` record of a split manifest.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize, Serialize)]
pub struct ManifestRecord {
    pub class_name: String,
    pub role: String,
}

/// Parses a CSV split manifest with a `class_name,role` header.
pub fn parse_split_manifest(text: &str) -> Result<BTreeMap<String, Role>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out: BTreeMap<String, Role> = BTreeMap::new();
    for rec in reader.deserialize::<ManifestRecord>() {
        let rec = rec.map_err(|e| Error::Dataset(format!("bad manifest record: {e}")))?;
        let role = Role::parse(&rec.role)?;
        if let Some(prev) = out.insert(rec.class_name.clone(), role) {
            if prev != role {
                return Err(Error::Dataset(format!(
                    "class `{}` is assigned to both {prev} and {role}",
                    rec.class_name
                )));
            }
        }
    }
    Ok(out)
}

/// Loads `<root>/<class_name>/<images>` into three roles per the manifest.
/// Images are resized to `image_shape` (C, H, W) and scaled into `[0, 1]`.
#[cfg(feature = "image-folder")]
pub fn ingest_image_folder(
    root: &std::path::Path,
    split_manifest: &str,
    image_shape: [usize; 3],
    min_per_class: usize,
) -> Result<DatasetTriple> {
    let roles = parse_split_manifest(split_manifest)?;
    let [c, h, w] = image_shape;
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!("unsupported channel count {c}")));
    }
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut class_dirs: Vec<(String, std::path::PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("no classes found under {}", root.display())));
    }

    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "images".into());
    let mut splits: BTreeMap<Role, DatasetSplit> = BTreeMap::new();
    for role in [Role::MetaTrain, Role::MetaVal, Role::MetaTest] {
        splits.insert(
            role,
            DatasetSplit {
                name: name.clone(),
                role,
                image_shape,
                classes: BTreeMap::new(),
                class_names: BTreeMap::new(),
            },
        );
    }
    for (id, (class_name, dir)) in class_dirs.iter().enumerate() {
        let Some(&role) = roles.get(class_name) else {
            continue;
        };
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut data = Vec::with_capacity(files.len() * c * h * w);
        for f in &files {
            let img = image::open(f)
                .map_err(|e| Error::Dataset(format!("unreadable image {}: {e}", f.display())))?;
            let img = img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle);
            if c == 3 {
                let rgb = img.to_rgb8();
                for ch in 0..3 {
                    for px in rgb.pixels() {
                        data.push(px.0[ch] as f64 / 255.0);
                    }
                }
            } else {
                data.extend(img.to_luma8().pixels().map(|p| p.0[0] as f64 / 255.0));
            }
        }
        if files.len() < min_per_class {
            return Err(Error::Dataset(format!(
                "class `{class_name}` has {} images, {min_per_class} needed",
                files.len()
            )));
        }
        let split = splits.get_mut(&role).expect("all roles present");
        split
            .classes
            .insert(id, Array::new(vec![files.len(), c, h, w], data)?);
        split.class_names.insert(id, class_name.clone());
    }
    for missing in roles.keys().filter(|n| !class_dirs.iter().any(|(d, _)| d == *n)) {
        return Err(Error::Dataset(format!("manifest class `{missing}` has no folder")));
    }
    let mut take = |r: Role| splits.remove(&r).expect("role present");
    let triple = DatasetTriple {
        train: take(Role::MetaTrain),
        val: take(Role::MetaVal),
        test: take(Role::MetaTest),
    };
    triple.validate_disjoint()?;
    Ok(triple)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dataset(seed: u64) -> DatasetTriple {
        let spec = SyntheticSpec::new(20, 16, 3, 40);
        make_synthetic_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn role_sizes_follow_ratio() {
        let d = small_dataset(0);
        assert_eq!(
            (d.train.classes.len(), d.val.classes.len(), d.test.classes.len()),
            (12, 3, 5)
        );
        d.validate_disjoint().unwrap();
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(small_dataset(9), small_dataset(9));
        assert_ne!(small_dataset(9).train, small_dataset(10).train);
    }

    #[test]
    fn too_few_classes_fail() {
        let spec = SyntheticSpec::new(2, 8, 3, 5);
        assert!(make_synthetic_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn minimal_episode() {
        let d = small_dataset(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = sample_episode(&d.train, 1, 1, 0, &mut rng).unwrap();
        assert_eq!(ep.support_x.shape, vec![1, 3, 16, 16]);
        assert_eq!(ep.query_x.rows(), 0);
        assert_eq!(ep.support_y, vec![0]);
        ep.validate().unwrap();
    }

    #[test]
    fn five_way_shapes() {
        let d = small_dataset(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = sample_episode(&d.test, 5, 5, 15, &mut rng).unwrap();
        assert_eq!(ep.support_x.shape, vec![25, 3, 16, 16]);
        assert_eq!(ep.query_x.shape, vec![75, 3, 16, 16]);
        assert_eq!(ep.provenance, Provenance::Real);
        ep.validate().unwrap();
    }

    #[test]
    fn deficient_class_is_named() {
        let d = small_dataset(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = sample_episode(&d.test, 5, 30, 15, &mut rng).unwrap_err().to_string();
        assert!(err.contains("synthetic-waves-"), "{err}");
        let err = sample_episode(&d.val, 5, 1, 1, &mut rng).unwrap_err().to_string();
        assert!(err.contains("3 classes"), "{err}");
    }

    #[test]
    fn test_episodes_only_touch_test_classes() {
        let d = small_dataset(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..600 {
            let ep = sample_episode(&d.test, 5, 1, 2, &mut rng).unwrap();
            for o in &ep.class_origin {
                assert!(d.test.classes.contains_key(&o.class_id().unwrap()));
            }
        }
    }

    #[test]
    fn episode_sampling_is_reproducible() {
        let d = small_dataset(5);
        let a = sample_episode(&d.train, 5, 2, 3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = sample_episode(&d.train, 5, 2, 3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    /// Nearest-centroid classification in pixel space, half the examples per
    /// class as centroids and half held out.
    fn centroid_accuracy(d: &DatasetTriple) -> f64 {
        let all: Vec<(&usize, &Array)> = d
            .train
            .classes
            .iter()
            .chain(&d.val.classes)
            .chain(&d.test.classes)
            .collect();
        let dim = all[0].1.row_len();
        let centroids: Vec<Vec<f64>> = all
            .iter()
            .map(|(_, a)| {
                let half = a.rows() / 2;
                let mut c = vec![0.0; dim];
                for i in 0..half {
                    for (s, v) in c.iter_mut().zip(a.row(i)) {
                        *s += v / half as f64;
                    }
                }
                c
            })
            .collect();
        let (mut hit, mut total) = (0, 0);
        for (truth, (_, a)) in all.iter().enumerate() {
            for i in a.rows() / 2..a.rows() {
                let x = a.row(i);
                let best = centroids
                    .iter()
                    .map(|c| c.iter().zip(x).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                hit += usize::from(best == truth);
                total += 1;
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn separated_classes_are_centroid_separable() {
        for family in [TextureFamily::Waves, TextureFamily::Blobs] {
            let mut spec = SyntheticSpec::new(20, 16, 3, 40);
            spec.family = family;
            let d = make_synthetic_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
            let acc = centroid_accuracy(&d);
            assert!(acc >= 0.9, "{family:?}: {acc}");
        }
    }

    #[cfg(feature = "image-folder")]
    #[test]
    fn image_folder_follows_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = String::from("class_name,role\n");
        for c in 0..10 {
            let cdir = dir.path().join(format!("c{c}"));
            std::fs::create_dir(&cdir).unwrap();
            for i in 0..3u8 {
                let img = image::RgbImage::from_pixel(12, 10, image::Rgb([c as u8 * 20, i * 50, 255]));
                img.save(cdir.join(format!("{i}.png"))).unwrap();
            }
            let role = match c {
                0..6 => "meta_train",
                6..8 => "meta_val",
                _ => "meta_test",
            };
            manifest.push_str(&format!("c{c},{role}\n"));
        }
        let d = ingest_image_folder(dir.path(), &manifest, [3, 8, 8], 3).unwrap();
        assert_eq!(
            (d.train.classes.len(), d.val.classes.len(), d.test.classes.len()),
            (6, 2, 2)
        );
        let a = d.train.examples(0).unwrap();
        assert_eq!(a.shape, vec![3, 3, 8, 8]);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((a.data[a.data.len() - 1] - 1.0).abs() < 1e-12);

        assert!(ingest_image_folder(dir.path(), &manifest, [3, 8, 8], 4).is_err());
        let empty = tempfile::tempdir().unwrap();
        let err = ingest_image_folder(empty.path(), &manifest, [3, 8, 8], 1).unwrap_err();
        assert!(err.to_string().contains("no classes found"));
    }

    #[test]
    fn manifest_rejects_double_assignment() {
        let err = parse_split_manifest("class_name,role\nwolf,meta_train\nwolf,meta_test\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("wolf"));
    }
}
