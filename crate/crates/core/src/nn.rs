//! Parameter storage and the layer building blocks shared by the backbone and
//! the head.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{BatchStats, ConvGeometry};
use crate::tensor::{Parameter, Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named parameters plus non-trainable buffers (batch-norm running stats).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<R: Real> {
    params: Vec<Parameter<R>>,
    lookup: HashMap<String, usize>,
    buffers: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            lookup: HashMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, param: Parameter<R>) -> Result<()> {
        if self.lookup.contains_key(&param.name) {
            return Err(Error::Config(format!("duplicate parameter name {:?}", param.name)));
        }
        self.lookup.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<R>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.lookup.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.lookup.get(name).map(|&i| &mut self.params[i].tensor)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<R>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.buffers.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<R>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<R>> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Sets every parameter and buffer value to zero.
    pub fn fill_zero(&mut self) {
        for p in &mut self.params {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = R::zero());
        }
        for b in self.buffers.values_mut() {
            b.data_mut().iter_mut().for_each(|v| *v = R::zero());
        }
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.tensor.cast()))
                .collect(),
            lookup: self.lookup.clone(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Writes parameters as `param.<name>` and buffers as `buffer.<name>`.
    pub fn write_to(&self, container: &mut Container) {
        for p in &self.params {
            container.insert(format!("param.{}", p.name), &p.tensor);
        }
        for (name, b) in &self.buffers {
            container.insert(format!("buffer.{name}"), b);
        }
    }

    /// Overwrites every parameter and buffer from `container`; shapes must
    /// match exactly.
    pub fn read_from(&mut self, container: &Container) -> Result<()> {
        for p in &mut self.params {
            let t = container.require::<R>(&format!("param.{}", p.name), Some(p.tensor.shape()))?;
            p.tensor = t.with_requires_grad(true);
        }
        for (name, b) in &mut self.buffers {
            *b = container.require::<R>(&format!("buffer.{name}"), Some(b.shape()))?;
        }
        Ok(())
    }
}

/// A forward pass in progress: the graph, the parameters it reads, and the
/// batch-norm statistics gathered along the way.
pub struct Forward<'a, R: Real> {
    pub graph: &'a mut Graph<R>,
    store: &'a ParamStore<R>,
    vars: HashMap<String, Var>,
    pub mode: Mode,
    bn_updates: Vec<(String, BatchStats, usize)>,
}

impl<'a, R: Real> Forward<'a, R> {
    pub fn new(graph: &'a mut Graph<R>, store: &'a ParamStore<R>, mode: Mode) -> Self {
        Forward {
            graph,
            store,
            vars: HashMap::new(),
            mode,
            bn_updates: Vec::new(),
        }
    }

    /// Graph handle for a parameter, added as a tracked leaf on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        let v = self.graph.input(t.clone().with_requires_grad(true));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter handles registered so far, by name.
    pub fn param_vars(&self) -> &HashMap<String, Var> {
        &self.vars
    }

    fn buffer(&self, name: &str) -> Result<&Tensor<R>> {
        self.store
            .buffer(name)
            .ok_or_else(|| Error::Config(format!("unknown buffer {name:?}")))
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats, usize)> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Copies graph gradients of every registered parameter into the store.
pub fn collect_grads<R: Real>(graph: &Graph<R>, vars: &HashMap<String, Var>, store: &mut ParamStore<R>) -> Result<()> {
    store.zero_grads();
    for (name, &v) in vars {
        if let Some(g) = graph.grad(v) {
            let g = g.to_vec();
            store
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?
                .accumulate_grad(&g)?;
        }
    }
    Ok(())
}

/// Folds batch statistics into the running estimates (unbiased variance).
pub fn apply_bn_updates<R: Real>(store: &mut ParamStore<R>, updates: &[(String, BatchStats, usize)]) -> Result<()> {
    for (prefix, stats, count) in updates {
        let unbias = if *count > 1 { *count as f64 / (*count - 1) as f64 } else { 1.0 };
        for (suffix, values, factor) in [("running_mean", &stats.mean, 1.0), ("running_var", &stats.var, unbias)] {
            let name = format!("{prefix}.{suffix}");
            let buf = store
                .buffer_mut(&name)
                .ok_or_else(|| Error::Config(format!("unknown buffer {name:?}")))?;
            for (r, &v) in buf.data_mut().iter_mut().zip(values.iter()) {
                *r = R::from_f64((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * v * factor);
            }
        }
    }
    Ok(())
}

fn uniform_init<R: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<R> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| R::from_f64(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub geom: ConvGeometry,
    pub bias: bool,
}

impl Conv3d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        Conv3d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            geom: ConvGeometry::unit(),
            bias: true,
        }
    }

    pub fn geometry(mut self, geom: ConvGeometry) -> Self {
        self.geom = geom;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn register<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        let [kt, kh, kw] = self.kernel;
        let fan_in = self.in_channels * kt * kh * kw;
        let shape = [self.out_channels, self.in_channels, kt, kh, kw];
        store.insert(Parameter::new(format!("{}.weight", self.name), uniform_init(&shape, fan_in, rng)))?;
        if self.bias {
            store.insert(Parameter::new(
                format!("{}.bias", self.name),
                uniform_init(&[self.out_channels], fan_in, rng),
            ))?;
        }
        Ok(())
    }

    pub fn forward<R: Real>(&self, f: &mut Forward<'_, R>, x: Var) -> Result<Var> {
        let w = f.param(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(f.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        f.graph.conv3d(x, w, b, self.geom)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let dims = <[usize; 5]>::try_from(input)
            .map_err(|_| Error::Config(format!("{}: expected rank-5 input, got {input:?}", self.name)))?;
        if dims[1] != self.in_channels {
            return Err(Error::Config(format!(
                "{}: expects {} channels, got {}",
                self.name, self.in_channels, dims[1]
            )));
        }
        let out = self
            .geom
            .output_extents([dims[2], dims[3], dims[4]], self.kernel)
            .ok_or_else(|| Error::Config(format!("{}: kernel does not fit {input:?}", self.name)))?;
        Ok(vec![dims[0], self.out_channels, out[0], out[1], out[2]])
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn register<R: Real>(&self, store: &mut ParamStore<R>) -> Result<()> {
        let c = self.channels;
        store.insert(Parameter::new(format!("{}.scale", self.name), Tensor::full(&[c], R::one())))?;
        store.insert(Parameter::new(format!("{}.shift", self.name), Tensor::zeros(&[c])))?;
        store.insert_buffer(format!("{}.running_mean", self.name), Tensor::zeros(&[c]));
        store.insert_buffer(format!("{}.running_var", self.name), Tensor::full(&[c], R::one()));
        Ok(())
    }

    pub fn forward<R: Real>(&self, f: &mut Forward<'_, R>, x: Var) -> Result<Var> {
        let scale = f.param(&format!("{}.scale", self.name))?;
        let shift = f.param(&format!("{}.shift", self.name))?;
        match f.mode {
            Mode::Train => {
                let (n, _, inner) = f.graph.value(x).ncx("batch_norm")?;
                let out = f.graph.batch_norm_train(x, scale, shift, BN_EPS)?;
                f.bn_updates.push((self.name.clone(), out.stats, n * inner));
                Ok(out.output)
            }
            Mode::Eval => {
                let mean: Vec<f64> = f
                    .buffer(&format!("{}.running_mean", self.name))?
                    .data()
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                let var: Vec<f64> = f
                    .buffer(&format!("{}.running_var", self.name))?
                    .data()
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                f.graph.batch_norm_eval(x, scale, shift, &mean, &var, BN_EPS)
            }
        }
    }
}

/// Convolution, batch norm, swish.
#[derive(Clone, Debug)]
pub struct ConvBnSwish {
    pub conv: Conv3d,
    pub bn: BatchNorm,
}

impl ConvBnSwish {
    pub fn new(conv: Conv3d) -> Self {
        let bn = BatchNorm::new(format!("{}.bn", conv.name), conv.out_channels);
        ConvBnSwish {
            conv: conv.without_bias(),
            bn,
        }
    }

    pub fn register<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        self.conv.register(store, rng)?;
        self.bn.register(store)
    }

    pub fn forward<R: Real>(&self, f: &mut Forward<'_, R>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        f.graph.swish(y)
    }
}

/// Per-level classifier: weight `[out, in]` and bias `[out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Linear {
            name: name.into(),
            in_features,
            out_features,
        }
    }

    pub fn register<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        store.insert(Parameter::new(
            format!("{}.weight", self.name),
            uniform_init(&[self.out_features, self.in_features], self.in_features, rng),
        ))?;
        store.insert(Parameter::new(
            format!("{}.bias", self.name),
            uniform_init(&[self.out_features], self.in_features, rng),
        ))
    }

    pub fn forward<R: Real>(&self, f: &mut Forward<'_, R>, x: Var) -> Result<Var> {
        let w = f.param(&format!("{}.weight", self.name))?;
        let b = f.param(&format!("{}.bias", self.name))?;
        f.graph.fully_connected(x, w, b)
    }
}

/// Temporal transpose convolution that doubles T and halves channels.
#[derive(Clone, Debug)]
pub struct UpTemporal {
    pub name: String,
    pub in_channels: usize,
}

impl UpTemporal {
    pub fn new(name: impl Into<String>, in_channels: usize) -> Result<Self> {
        let name = name.into();
        if in_channels % 2 != 0 {
            return Err(Error::Config(format!("{name}: cannot halve odd channel count {in_channels}")));
        }
        Ok(UpTemporal { name, in_channels })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels / 2
    }

    pub fn register<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        let (c, k) = (self.in_channels, self.out_channels());
        store.insert(Parameter::new(
            format!("{}.weight", self.name),
            uniform_init(&[c, k, 2, 1, 1], c, rng),
        ))?;
        store.insert(Parameter::new(format!("{}.bias", self.name), uniform_init(&[k], c, rng)))
    }

    pub fn forward<R: Real>(&self, f: &mut Forward<'_, R>, x: Var) -> Result<Var> {
        let w = f.param(&format!("{}.weight", self.name))?;
        let b = f.param(&format!("{}.bias", self.name))?;
        f.graph.transpose_conv3d_temporal(x, w, Some(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv3d::new("c", 2, 2, [1, 1, 1]);
        conv.register(&mut store, &mut rng).unwrap();
        assert!(conv.register(&mut store, &mut rng).is_err());
    }

    #[test]
    fn store_round_trips_through_container() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        ConvBnSwish::new(Conv3d::new("blk", 3, 4, [3, 3, 3]))
            .register(&mut store, &mut rng)
            .unwrap();
        let mut c = Container::new();
        store.write_to(&mut c);
        let mut other = store.clone();
        other.fill_zero();
        other.read_from(&c).unwrap();
        assert_eq!(other, store);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        BatchNorm::new("bn", 1).register(&mut store).unwrap();
        let stats = BatchStats {
            mean: vec![2.0],
            var: vec![3.0],
        };
        apply_bn_updates(&mut store, &[("bn".into(), stats, 4)]).unwrap();
        assert!((store.buffer("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-12);
        let want = 0.9 + 0.1 * 3.0 * 4.0 / 3.0;
        assert!((store.buffer("bn.running_var").unwrap().data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn odd_up_channels_rejected() {
        assert!(matches!(UpTemporal::new("up", 5), Err(Error::Config(_))));
    }
}
