//! Parameter registry and the trainable/frozen partition.
//!
//! Every module builds its weights through a [`Builder`], which records the
//! parameter under a dotted name together with its group and trainability.
//! Trainable parameters are backed by a [`Var`]; frozen ones are plain tensors
//! and therefore never enter the autograd graph.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Peft,
    Decoder,
    LadderEncoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Backbone,
        ParamGroup::Peft,
        ParamGroup::Decoder,
        ParamGroup::LadderEncoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Peft => "peft",
            ParamGroup::Decoder => "decoder",
            ParamGroup::LadderEncoder => "ladder_encoder",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub trainable: usize,
    pub frozen: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterPartition {
    pub trainable_count: usize,
    pub frozen_count: usize,
    pub per_group: BTreeMap<ParamGroup, GroupCount>,
}

impl ParameterPartition {
    pub fn group(&self, g: ParamGroup) -> GroupCount {
        self.per_group.get(&g).copied().unwrap_or_default()
    }

    pub fn total(&self) -> usize {
        self.trainable_count + self.frozen_count
    }

    /// CSV with columns `group,trainable,frozen`, one row per group, plus a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,trainable,frozen\n");
        for g in ParamGroup::ALL {
            let c = self.group(g);
            out.push_str(&format!("{},{},{}\n", g, c.trainable, c.frozen));
        }
        out.push_str(&format!("total,{},{}\n", self.trainable_count, self.frozen_count));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    Const(f32),
    Normal { std: f32 },
    /// Normal truncated to two standard deviations.
    TruncNormal { std: f32 },
    Uniform { bound: f32 },
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the default for linear and conv layers.
    FanIn(usize),
    Data(Vec<f32>),
}

impl Init {
    fn sample(&self, n: usize, seeds: SeedTree) -> Result<Vec<f32>> {
        let mut rng = seeds.rng();
        let v = match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![*c; n],
            Init::Normal { std } => {
                let d = Normal::new(0.0f32, *std).map_err(|e| Error::Build(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::TruncNormal { std } => {
                let d = Normal::new(0.0f32, 1.0).map_err(|e| Error::Build(e.to_string()))?;
                (0..n)
                    .map(|_| loop {
                        let x: f32 = d.sample(&mut rng);
                        if x.abs() <= 2.0 {
                            break x * std;
                        }
                    })
                    .collect()
            }
            Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-*bound..=*bound)).collect(),
            Init::FanIn(fan_in) => {
                let b = 1.0 / (*fan_in.max(&1) as f32).sqrt();
                (0..n).map(|_| rng.random_range(-b..=b)).collect()
            }
            Init::Data(d) => {
                if d.len() != n {
                    return Err(Error::Build(format!(
                        "init data has {} elements, parameter needs {n}",
                        d.len()
                    )));
                }
                d.clone()
            }
        };
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Param,
    /// Non-learned state saved with checkpoints (batch-norm statistics, fixed encodings).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub var: Option<Var>,
    pub group: ParamGroup,
    pub trainable: bool,
    pub role: Role,
}

impl Entry {
    pub fn numel(&self) -> usize {
        self.tensor.elem_count()
    }

    /// Current value (reads through the `Var` for trainable entries).
    pub fn value(&self) -> Tensor {
        match &self.var {
            Some(v) => v.as_tensor().clone(),
            None => self.tensor.clone(),
        }
    }
}

/// Named arrays that pretrained weights are read from.
#[derive(Debug, Clone, Default)]
pub struct WeightSource {
    pub arrays: HashMap<String, Tensor>,
    /// When true, every requested parameter must be present.
    pub strict: bool,
}

struct StoreInner {
    entries: BTreeMap<String, Entry>,
    device: Device,
    seeds: SeedTree,
    shape_only: bool,
}

/// Shared registry of every parameter and buffer in a model.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
}

impl fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.lock();
        f.debug_struct("ParamStore")
            .field("entries", &inner.entries.len())
            .field("shape_only", &inner.shape_only)
            .finish()
    }
}

impl ParamStore {
    pub fn new(device: Device, seeds: SeedTree) -> Self {
        Self::with_mode(device, seeds, false)
    }

    /// A store whose tensors are zero-stride broadcasts: shapes and counts are
    /// exact but no parameter memory is allocated. Forward passes are not meaningful.
    pub fn shape_only() -> Self {
        Self::with_mode(Device::Cpu, SeedTree::new(0), true)
    }

    fn with_mode(device: Device, seeds: SeedTree, shape_only: bool) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                entries: BTreeMap::new(),
                device,
                seeds,
                shape_only,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, StoreInner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn device(&self) -> Device {
        self.lock().device.clone()
    }

    pub fn is_shape_only(&self) -> bool {
        self.lock().shape_only
    }

    pub fn root(&self, group: ParamGroup) -> Builder {
        Builder {
            store: self.clone(),
            prefix: String::new(),
            group,
            trainable: true,
            source: None,
            source_root: String::new(),
        }
    }

    pub fn entries(&self) -> Vec<Entry> {
        self.lock().entries.values().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Entry> {
        self.lock().entries.get(name).cloned()
    }

    pub fn params(&self) -> Vec<Entry> {
        self.lock()
            .entries
            .values()
            .filter(|e| e.role == Role::Param)
            .cloned()
            .collect()
    }

    /// Trainable parameter variables in name order.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.lock()
            .entries
            .values()
            .filter(|e| e.role == Role::Param && e.trainable)
            .filter_map(|e| e.var.clone().map(|v| (e.name.clone(), v)))
            .collect()
    }

    pub fn buffers(&self) -> Vec<(String, Var)> {
        self.lock()
            .entries
            .values()
            .filter(|e| e.role == Role::Buffer)
            .filter_map(|e| e.var.clone().map(|v| (e.name.clone(), v)))
            .collect()
    }

    pub fn partition(&self) -> ParameterPartition {
        self.partition_where(|_| true)
    }

    /// Partition restricted to parameters whose name starts with `prefix`.
    pub fn partition_prefix(&self, prefix: &str) -> ParameterPartition {
        let dotted = format!("{prefix}.");
        self.partition_where(|e| prefix.is_empty() || e.name.starts_with(&dotted))
    }

    pub fn partition_where(&self, keep: impl Fn(&Entry) -> bool) -> ParameterPartition {
        let mut p = ParameterPartition::default();
        for e in self
            .lock()
            .entries
            .values()
            .filter(|e| e.role == Role::Param && keep(e))
        {
            let c = p.per_group.entry(e.group).or_default();
            if e.trainable {
                c.trainable += e.numel();
                p.trainable_count += e.numel();
            } else {
                c.frozen += e.numel();
                p.frozen_count += e.numel();
            }
        }
        p
    }

    /// Overwrite a trainable parameter or buffer in place.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        if entry.tensor.dims() != value.dims() {
            return Err(Error::WeightShape {
                name: name.to_string(),
                expected: entry.tensor.dims().to_vec(),
                found: value.dims().to_vec(),
            });
        }
        match entry.var {
            Some(v) => Ok(v.set(&value.to_dtype(DType::F32)?)?),
            None => Err(Error::Build(format!("`{name}` is frozen and cannot be reassigned"))),
        }
    }

    fn register(&self, entry: Entry) -> Result<()> {
        let mut inner = self.lock();
        if inner.entries.contains_key(&entry.name) {
            return Err(Error::Build(format!("duplicate parameter name `{}`", entry.name)));
        }
        inner.entries.insert(entry.name.clone(), entry);
        Ok(())
    }
}

/// Scoped handle for creating parameters under a name prefix.
#[derive(Clone)]
pub struct Builder {
    store: ParamStore,
    prefix: String,
    group: ParamGroup,
    trainable: bool,
    source: Option<Arc<WeightSource>>,
    source_root: String,
}

impl fmt::Debug for Builder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Builder")
            .field("prefix", &self.prefix)
            .field("group", &self.group)
            .field("trainable", &self.trainable)
            .finish()
    }
}

impl Builder {
    pub fn pp(&self, name: impl fmt::Display) -> Self {
        let mut b = self.clone();
        b.prefix = self.full_name(&name.to_string());
        b
    }

    pub fn with_group(&self, group: ParamGroup) -> Self {
        let mut b = self.clone();
        b.group = group;
        b
    }

    pub fn with_trainable(&self, trainable: bool) -> Self {
        let mut b = self.clone();
        b.trainable = trainable;
        b
    }

    pub fn frozen(&self) -> Self {
        self.with_trainable(false)
    }

    /// Parameters created below this point are looked up in `source`
    /// by their name relative to the current prefix.
    pub fn with_source(&self, source: Option<Arc<WeightSource>>) -> Self {
        let mut b = self.clone();
        b.source = source;
        b.source_root = self.prefix.clone();
        b
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> Device {
        self.store.device()
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn source_name(&self, full: &str) -> String {
        if self.source_root.is_empty() {
            full.to_string()
        } else {
            full.strip_prefix(&format!("{}.", self.source_root))
                .unwrap_or(full)
                .to_string()
        }
    }

    fn make(&self, name: &str, shape: &[usize], init: Init, role: Role) -> Result<Entry> {
        let full = self.full_name(name);
        let (device, seeds, shape_only) = {
            let inner = self.store.lock();
            (inner.device.clone(), inner.seeds, inner.shape_only)
        };
        let trainable = self.trainable && role == Role::Param;
        if shape_only {
            let t = Tensor::zeros((), DType::F32, &Device::Cpu)?.broadcast_as(shape)?;
            return Ok(Entry {
                name: full,
                tensor: t,
                var: None,
                group: self.group,
                trainable,
                role,
            });
        }
        let loaded = match &self.source {
            Some(src) => {
                let key = self.source_name(&full);
                match src.arrays.get(&key) {
                    Some(t) => {
                        if t.dims() != shape {
                            return Err(Error::WeightShape {
                                name: key,
                                expected: shape.to_vec(),
                                found: t.dims().to_vec(),
                            });
                        }
                        Some(t.to_dtype(DType::F32)?.to_device(&device)?)
                    }
                    None if src.strict && role == Role::Param => return Err(Error::MissingWeight(key)),
                    None => None,
                }
            }
            None => None,
        };
        let tensor = match loaded {
            Some(t) => t,
            None => {
                let n: usize = shape.iter().product();
                let data = init.sample(n, seeds.child("init").child(&full))?;
                Tensor::from_vec(data, Shape::from(shape), &device)?
            }
        };
        let (tensor, var) = if trainable || role == Role::Buffer {
            let v = Var::from_tensor(&tensor)?;
            let t = if role == Role::Buffer {
                v.as_tensor().detach()
            } else {
                v.as_tensor().clone()
            };
            (t, Some(v))
        } else {
            (tensor.detach(), None)
        };
        Ok(Entry {
            name: full,
            tensor,
            var,
            group: self.group,
            trainable,
            role,
        })
    }

    /// Create (or load) a parameter and return the tensor used in forward passes.
    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let e = self.make(name, shape, init, Role::Param)?;
        let t = e.tensor.clone();
        self.store.register(e)?;
        Ok(t)
    }

    /// Create a buffer; the returned `Var` is updated in place during training.
    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Option<Var>> {
        let e = self.make(name, shape, init, Role::Buffer)?;
        let v = e.var.clone();
        self.store.register(e)?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_counts_by_group_and_flag() {
        let store = ParamStore::new(Device::Cpu, SeedTree::new(0));
        let root = store.root(ParamGroup::Backbone).frozen();
        root.param("a", &[3, 4], Init::Zeros).unwrap();
        let dec = store.root(ParamGroup::Decoder);
        dec.pp("head").param("w", &[5], Init::FanIn(5)).unwrap();
        dec.buffer("running", &[5], Init::Zeros).unwrap();
        let p = store.partition();
        assert_eq!(p.trainable_count, 5);
        assert_eq!(p.frozen_count, 12);
        assert_eq!(p.group(ParamGroup::Backbone).frozen, 12);
        assert_eq!(p.group(ParamGroup::Decoder).trainable, 5);
        assert_eq!(store.trainable_vars().len(), 1);
        assert_eq!(store.trainable_vars()[0].0, "head.w");
        assert!(p.to_csv().contains("decoder,5,0"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let store = ParamStore::new(Device::Cpu, SeedTree::new(0));
        let b = store.root(ParamGroup::Decoder);
        b.param("w", &[1], Init::Zeros).unwrap();
        assert!(b.param("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn init_depends_on_name_not_order() {
        let s1 = ParamStore::new(Device::Cpu, SeedTree::new(1));
        let s2 = ParamStore::new(Device::Cpu, SeedTree::new(1));
        let a1 = s1.root(ParamGroup::Decoder).param("a", &[4], Init::Normal { std: 1.0 }).unwrap();
        s2.root(ParamGroup::Decoder).param("b", &[4], Init::Normal { std: 1.0 }).unwrap();
        let a2 = s2.root(ParamGroup::Decoder).param("a", &[4], Init::Normal { std: 1.0 }).unwrap();
        assert_eq!(a1.to_vec1::<f32>().unwrap(), a2.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn shape_only_allocates_nothing_but_counts() {
        let store = ParamStore::shape_only();
        store.root(ParamGroup::Decoder).param("big", &[4096, 4096], Init::FanIn(4096)).unwrap();
        assert_eq!(store.partition().trainable_count, 4096 * 4096);
    }

    #[test]
    fn source_shape_mismatch_names_parameter() {
        let store = ParamStore::new(Device::Cpu, SeedTree::new(0));
        let mut arrays = HashMap::new();
        arrays.insert("blocks.0.w".to_string(), Tensor::zeros((2, 2), DType::F32, &Device::Cpu).unwrap());
        let src = Arc::new(WeightSource { arrays, strict: true });
        let b = store.root(ParamGroup::Backbone).pp("enc").with_source(Some(src));
        let err = b.pp("blocks.0").param("w", &[3, 2], Init::Zeros).unwrap_err();
        match err {
            Error::WeightShape { name, expected, found } => {
                assert_eq!(name, "blocks.0.w");
                assert_eq!(expected, vec![3, 2]);
                assert_eq!(found, vec![2, 2]);
            }
            e => panic!("unexpected {e}"),
        }
    }
}
