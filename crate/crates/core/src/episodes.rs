//! Datasets, N-way K-shot episode sampling, synthetic pools and the
//! dataset file format.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::read_exact;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"FSDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecord {
    pub id: u32,
    pub instances: Vec<Tensor>,
}

/// Labelled instance pool. All instances share one shape, every class has
/// at least one instance and class ids are unique.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    role: Role,
    instance_shape: Vec<usize>,
    classes: Vec<ClassRecord>,
}

impl Dataset {
    pub fn new(role: Role, classes: Vec<ClassRecord>) -> Result<Self> {
        let first = classes
            .first()
            .ok_or_else(|| Error::invalid("dataset needs at least one class"))?;
        let shape = first
            .instances
            .first()
            .ok_or_else(|| Error::invalid(format!("class {} has no instances", first.id)))?
            .shape()
            .to_vec();
        let mut ids = std::collections::BTreeSet::new();
        for c in &classes {
            if !ids.insert(c.id) {
                return Err(Error::invalid(format!("duplicate class id {}", c.id)));
            }
            if c.instances.is_empty() {
                return Err(Error::invalid(format!("class {} has no instances", c.id)));
            }
            if let Some(bad) = c.instances.iter().find(|t| t.shape() != shape.as_slice()) {
                return Err(Error::shape("dataset instance", &shape, bad.shape()));
            }
        }
        Ok(Dataset {
            role,
            instance_shape: shape,
            classes,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn instance_shape(&self) -> &[usize] {
        &self.instance_shape
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_instances(&self) -> usize {
        self.classes.iter().map(|c| c.instances.len()).sum()
    }

    /// Classes `range` as a new dataset with the given role.
    pub fn subset(&self, range: std::ops::Range<usize>, role: Role) -> Result<Dataset> {
        if range.end > self.classes.len() {
            return Err(Error::invalid("class range out of bounds"));
        }
        Dataset::new(role, self.classes[range].to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_dataset(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        load_dataset(path)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = DatasetHeader {
            class_count: self.classes.len(),
            instance_shape: self.instance_shape.clone(),
            class_ids: self.classes.iter().map(|c| c.id).collect(),
            instance_counts: self.classes.iter().map(|c| c.instances.len()).collect(),
            role: self.role,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for c in &self.classes {
            for inst in &c.instances {
                for v in inst.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        read_exact(&mut r, &mut b4, "version")?;
        let version = u32::from_le_bytes(b4);
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        read_exact(&mut r, &mut b4, "header length")?;
        let mut json = vec![0u8; u32::from_le_bytes(b4) as usize];
        read_exact(&mut r, &mut json, "header")?;
        let h: DatasetHeader = serde_json::from_slice(&json)?;
        if h.class_ids.len() != h.class_count || h.instance_counts.len() != h.class_count {
            return Err(Error::Format("header class lists disagree with class_count".into()));
        }
        if h.class_count == 0 {
            return Err(Error::Format("dataset has no classes".into()));
        }
        let per = h.instance_shape.iter().product::<usize>();
        let mut classes = Vec::with_capacity(h.class_count);
        for (&id, &count) in h.class_ids.iter().zip(&h.instance_counts) {
            let mut buf = vec![0u8; per * count * 8];
            read_exact(&mut r, &mut buf, "class block")?;
            let values: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let instances = values
                .chunks(per.max(1))
                .take(count)
                .map(|c| Tensor::new(h.instance_shape.clone(), c.to_vec()))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Format(format!("class {id}: {e}")))?;
            classes.push(ClassRecord { id, instances });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after last class block".into()));
        }
        Dataset::new(h.role, classes).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    class_count: usize,
    instance_shape: Vec<usize>,
    class_ids: Vec<u32>,
    instance_counts: Vec<usize>,
    role: Role,
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    dataset.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Episode shape: `ways` classes, `shots` support and `queries` query
/// instances per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl TaskSpec {
    pub fn new(ways: usize, shots: usize, queries: usize) -> Result<Self> {
        let s = TaskSpec { ways, shots, queries };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.shots < 1 || self.queries < 1 {
            return Err(Error::invalid(format!(
                "task spec needs ways >= 2, shots >= 1, queries >= 1 (got {}/{}/{})",
                self.ways, self.shots, self.queries
            )));
        }
        Ok(())
    }
}

/// Batched instances with local labels and their source `(class id,
/// instance index)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub sources: Vec<(u32, usize)>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub support: LabeledSet,
    pub query: LabeledSet,
    /// Global class id of each local label.
    pub classes: Vec<u32>,
}

impl Task {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }
}

/// Draws one episode. Classes are chosen uniformly without replacement and
/// relabelled `0..N` in selection order; within each class `K + Q` distinct
/// instances are drawn and the first `K` go to the support set.
pub fn sample_task<R: Rng + ?Sized>(dataset: &Dataset, spec: TaskSpec, rng: &mut R) -> Result<Task> {
    spec.validate()?;
    let need = spec.shots + spec.queries;
    if dataset.num_classes() < spec.ways {
        return Err(Error::Insufficient(format!(
            "{}-way task from a {}-class dataset",
            spec.ways,
            dataset.num_classes()
        )));
    }
    let eligible: Vec<usize> = (0..dataset.num_classes())
        .filter(|&i| dataset.classes[i].instances.len() >= need)
        .collect();
    if eligible.len() < spec.ways {
        return Err(Error::Insufficient(format!(
            "only {} classes have the {need} instances a {}-shot/{}-query task needs",
            eligible.len(),
            spec.shots,
            spec.queries
        )));
    }
    let chosen = index::sample(rng, eligible.len(), spec.ways);
    let mut sx = Vec::with_capacity(spec.ways * spec.shots);
    let mut qx = Vec::with_capacity(spec.ways * spec.queries);
    let (mut sy, mut qy, mut ss, mut qs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut classes = Vec::with_capacity(spec.ways);
    for (label, ci) in chosen.iter().enumerate() {
        let class = &dataset.classes[eligible[ci]];
        classes.push(class.id);
        let picks = index::sample(rng, class.instances.len(), need);
        for (j, inst) in picks.iter().enumerate() {
            if j < spec.shots {
                sx.push(class.instances[inst].clone());
                sy.push(label);
                ss.push((class.id, inst));
            } else {
                qx.push(class.instances[inst].clone());
                qy.push(label);
                qs.push((class.id, inst));
            }
        }
    }
    Ok(Task {
        support: LabeledSet {
            x: Tensor::stack(&sx)?,
            labels: sy,
            sources: ss,
        },
        query: LabeledSet {
            x: Tensor::stack(&qx)?,
            labels: qy,
            sources: qs,
        },
        classes,
    })
}

fn default_first_class_id() -> u32 {
    0
}

/// Gaussian class clusters.
///
/// Class means are `class_separation · z` with `z ~ N(0, I)` on the first
/// `informative_dims` coordinates and zero elsewhere. Instances add noise
/// with scale `noise_scale` on informative coordinates and
/// `nuisance_scale` on the rest. With `map_seed` set, every instance is
/// pushed through one fixed random linear map drawn from that seed, so
/// pools with different `seed` but equal `map_seed` share a generative map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub shape: Vec<usize>,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
    #[serde(default)]
    pub informative_dims: Option<usize>,
    #[serde(default)]
    pub nuisance_scale: Option<f64>,
    #[serde(default)]
    pub map_seed: Option<u64>,
    #[serde(default = "default_first_class_id")]
    pub first_class_id: u32,
}

impl SynthSpec {
    pub fn new(n_classes: usize, per_class: usize, shape: Vec<usize>, class_separation: f64, noise_scale: f64, seed: u64) -> Self {
        SynthSpec {
            n_classes,
            per_class,
            shape,
            class_separation,
            noise_scale,
            seed,
            informative_dims: None,
            nuisance_scale: None,
            map_seed: None,
            first_class_id: 0,
        }
    }
}

pub fn synth_dataset(spec: &SynthSpec, role: Role) -> Result<Dataset> {
    if spec.n_classes == 0 || spec.per_class == 0 || spec.shape.iter().product::<usize>() == 0 {
        return Err(Error::invalid("synthetic dataset needs positive counts and shape"));
    }
    let nuisance = spec.nuisance_scale.unwrap_or(spec.noise_scale);
    for (name, v) in [
        ("class_separation", spec.class_separation),
        ("noise_scale", spec.noise_scale),
        ("nuisance_scale", nuisance),
    ] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("{name} must be finite and non-negative")));
        }
    }
    let dim: usize = spec.shape.iter().product();
    let informative = spec.informative_dims.unwrap_or(dim).min(dim);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let map: Option<Vec<f64>> = spec.map_seed.map(|s| {
        let mut mrng = ChaCha8Rng::seed_from_u64(s);
        let scale = 1.0 / (dim as f64).sqrt();
        (0..dim * dim).map(|_| std.sample(&mut mrng) * scale).collect()
    });
    let mut classes = Vec::with_capacity(spec.n_classes);
    for c in 0..spec.n_classes {
        let mean: Vec<f64> = (0..dim)
            .map(|d| {
                let z: f64 = std.sample(&mut rng);
                if d < informative {
                    spec.class_separation * z
                } else {
                    0.0
                }
            })
            .collect();
        let mut instances = Vec::with_capacity(spec.per_class);
        for _ in 0..spec.per_class {
            let latent: Vec<f64> = mean
                .iter()
                .enumerate()
                .map(|(d, m)| {
                    let s = if d < informative { spec.noise_scale } else { nuisance };
                    m + s * std.sample(&mut rng)
                })
                .collect();
            let x = match &map {
                Some(m) => (0..dim)
                    .map(|i| (0..dim).map(|j| m[i * dim + j] * latent[j]).sum())
                    .collect(),
                None => latent,
            };
            instances.push(Tensor::new(spec.shape.clone(), x)?);
        }
        classes.push(ClassRecord {
            id: spec.first_class_id + c as u32,
            instances,
        });
    }
    Dataset::new(role, classes)
}

/// Disjoint train/validation/test pools drawn from one synthetic stream.
pub fn synth_splits(spec: &SynthSpec, train: usize, validation: usize, test: usize) -> Result<[Dataset; 3]> {
    let mut all = spec.clone();
    all.n_classes = train + validation + test;
    let d = synth_dataset(&all, Role::Train)?;
    Ok([
        d.subset(0..train, Role::Train)?,
        d.subset(train..train + validation, Role::Validation)?,
        d.subset(train + validation..train + validation + test, Role::Test)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn pool(n: usize, per: usize) -> Dataset {
        synth_dataset(&SynthSpec::new(n, per, vec![3], 2.0, 0.5, 1), Role::Train).unwrap()
    }

    #[test]
    fn five_way_one_shot_sizes() {
        let d = pool(12, 20);
        let t = sample_task(&d, TaskSpec::new(5, 1, 15).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.support.len(), 5);
        assert_eq!(t.query.len(), 75);
        assert_eq!(t.support.x.shape(), &[5, 3]);
        let labels: BTreeSet<_> = t.support.labels.iter().copied().collect();
        assert_eq!(labels, (0..5).collect());
        for k in 0..5 {
            assert_eq!(t.query.labels.iter().filter(|&&l| l == k).count(), 15);
        }
    }

    #[test]
    fn too_many_ways() {
        let d = pool(5, 10);
        let r = sample_task(&d, TaskSpec::new(6, 1, 1).unwrap(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Insufficient(_))));
    }

    #[test]
    fn too_few_instances() {
        let d = pool(5, 3);
        let r = sample_task(&d, TaskSpec::new(2, 2, 2).unwrap(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Insufficient(_))));
    }

    #[test]
    fn invalid_task_spec() {
        assert!(TaskSpec::new(1, 1, 1).is_err());
        assert!(TaskSpec::new(2, 0, 1).is_err());
        assert!(TaskSpec::new(2, 1, 0).is_err());
    }

    #[test]
    fn two_way_from_four_classes_hits_six_pairs() {
        let d = pool(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        let n = 10_000;
        for _ in 0..n {
            let t = sample_task(&d, TaskSpec::new(2, 1, 1).unwrap(), &mut rng).unwrap();
            let (a, b) = (t.classes[0].min(t.classes[1]), t.classes[0].max(t.classes[1]));
            *counts.entry((a, b)).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        for c in counts.values() {
            assert!((*c as f64 / n as f64 - 1.0 / 6.0).abs() <= 0.02);
        }
    }

    #[test]
    fn relabel_follows_selection_order() {
        let d = pool(8, 6);
        let t = sample_task(&d, TaskSpec::new(4, 2, 2).unwrap(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (src, &label) in t.support.sources.iter().zip(&t.support.labels) {
            assert_eq!(t.classes[label], src.0);
        }
        let ids: BTreeSet<_> = t.classes.iter().collect();
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn synth_is_deterministic_and_degenerates() {
        let s = SynthSpec::new(12, 5, vec![2, 2], 1.5, 0.1, 42);
        assert_eq!(synth_dataset(&s, Role::Train).unwrap(), synth_dataset(&s, Role::Train).unwrap());
        let mut flat = s.clone();
        flat.class_separation = 0.0;
        flat.noise_scale = 0.0;
        let d = synth_dataset(&flat, Role::Train).unwrap();
        assert_eq!(d.num_classes(), 12);
        let first = &d.classes()[0].instances[0];
        assert!(d.classes().iter().all(|c| &c.instances[0] == first));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let d = pool(3, 4);
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(buf.as_slice()).unwrap(), d);
        let mut bad = buf.clone();
        bad[1] = b'X';
        assert!(matches!(Dataset::read_from(bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(Dataset::read_from(&buf[..buf.len() - 8]), Err(Error::Format(_))));
        let mut v2 = buf.clone();
        v2[4] = 2;
        assert!(matches!(Dataset::read_from(v2.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn empty_class_list_is_rejected() {
        assert!(Dataset::new(Role::Train, vec![]).is_err());
        let header = br#"{"class_count":0,"instance_shape":[2],"class_ids":[],"instance_counts":[],"role":"train"}"#;
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header);
        assert!(Dataset::read_from(buf.as_slice()).is_err());
    }
}
