//! Prefix mapper: projects the ECG embedding `z_e` to a `12 × d′` sequence,
//! refines it with a small transformer stack and adds the per-lead
//! representation `p_e`.

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::layers::{linear, linear_specs, transformer_layer, transformer_layer_specs};
use crate::nn::{BlockConfig, Graph, Mode, ParamSpec, ParamStore, Scalar, Tensor, Var};
use crate::signal::N_LEADS;

#[derive(Clone, Debug, PartialEq)]
pub struct MapperConfig {
    /// Input embedding width `d`.
    pub d_in: usize,
    pub channels: usize,
    pub d_prime: usize,
    pub layers: usize,
    pub heads: usize,
    pub init_std: f64,
}

impl MapperConfig {
    pub fn new(d_in: usize, d_prime: usize) -> Self {
        Self {
            d_in,
            channels: N_LEADS,
            d_prime,
            layers: 2,
            heads: 4,
            init_std: 0.02,
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig::new(self.d_prime, self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != N_LEADS {
            return Err(Error::invalid(format!("mapper channels must be {N_LEADS}")));
        }
        if self.d_in == 0 || self.layers == 0 {
            return Err(Error::invalid("mapper d_in and layers must be positive"));
        }
        self.block().validate()
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut specs = linear_specs("mapper.proj", self.d_in, self.channels * self.d_prime, self.init_std);
        for l in 0..self.layers {
            specs.extend(transformer_layer_specs(&format!("mapper.layer{l}"), &self.block(), self.init_std));
        }
        specs
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("mapper.layers", self.layers);
        kv.set("mapper.heads", self.heads);
        kv.set("mapper.init_std", self.init_std);
    }

    pub fn with_kv(mut self, kv: &KeyValues) -> Result<Self> {
        self.layers = kv.get_or("mapper.layers", self.layers)?;
        self.heads = kv.get_or("mapper.heads", self.heads)?;
        self.init_std = kv.get_or("mapper.init_std", self.init_std)?;
        self.validate()?;
        Ok(self)
    }
}

/// Which parts of the mapper run. `Full` is the model; the others are the
/// ablation paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapperVariant {
    Full,
    /// No `p_e` addition.
    NoSkip,
    /// Linear projection and reshape only, then `p_e`; no transformer layers.
    LinearOnly,
}

#[derive(Clone, Debug)]
pub struct Mapper {
    cfg: MapperConfig,
}

impl Mapper {
    pub fn new(cfg: MapperConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &MapperConfig {
        &self.cfg
    }

    /// `z_e: [1×d]`, `p_e: [12×d′]` → `[12×d′]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, z_e: Var, p_e: Var, variant: MapperVariant) -> Result<Var> {
        let (c, dp) = (self.cfg.channels, self.cfg.d_prime);
        if g.shape(z_e).iter().product::<usize>() != self.cfg.d_in {
            return Err(Error::shape(format!(
                "mapper expects an embedding of length {}, got {:?}",
                self.cfg.d_in,
                g.shape(z_e)
            )));
        }
        if g.shape(p_e) != [c, dp] {
            return Err(Error::shape(format!(
                "lead representation must be {c}×{dp}, got {:?}",
                g.shape(p_e)
            )));
        }
        let z = g.reshape(z_e, &[1, self.cfg.d_in])?;
        let flat = linear(g, store, "mapper.proj", z)?;
        let mut h = g.reshape(flat, &[c, dp])?;
        if variant != MapperVariant::LinearOnly {
            let block = self.cfg.block();
            let mut mode = Mode::eval();
            for l in 0..self.cfg.layers {
                h = transformer_layer(g, store, &format!("mapper.layer{l}"), h, &block, &mut mode)?;
            }
        }
        match variant {
            MapperVariant::NoSkip => Ok(h),
            _ => g.add(h, p_e),
        }
    }

    fn run<T: Scalar>(&self, store: &ParamStore<T>, z_e: &[T], p_e: &Tensor<T>, variant: MapperVariant) -> Result<Tensor<T>> {
        let g = Graph::new();
        let z = g.constant(Tensor::new(vec![1, z_e.len()], z_e.to_vec())?);
        let p = g.constant(p_e.clone());
        let out = self.forward(&g, store, z, p, variant)?;
        let v = g.value(out).clone();
        Ok(v)
    }

    /// `z_prefix = z_et + p_e`.
    pub fn map_prefix<T: Scalar>(&self, store: &ParamStore<T>, z_e: &[T], p_e: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(store, z_e, p_e, MapperVariant::Full)
    }

    /// `z_et` alone.
    pub fn map_prefix_no_skip<T: Scalar>(&self, store: &ParamStore<T>, z_e: &[T]) -> Result<Tensor<T>> {
        let zeros = Tensor::zeros(&[self.cfg.channels, self.cfg.d_prime]);
        self.run(store, z_e, &zeros, MapperVariant::NoSkip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn setup(d_in: usize, d_prime: usize) -> (Mapper, ParamStore<f64>) {
        let m = Mapper::new(MapperConfig::new(d_in, d_prime)).unwrap();
        let mut store = ParamStore::new();
        store.init_from_specs(&m.config().specs(), &mut SeededRng::new(3));
        (m, store)
    }

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        let mut r = SeededRng::new(seed);
        (0..n).map(|_| r.normal()).collect()
    }

    #[test]
    fn zero_skip_equals_no_skip() {
        let (m, store) = setup(32, 64);
        let z = randn(32, 1);
        let a = m.map_prefix(&store, &z, &Tensor::zeros(&[12, 64])).unwrap();
        assert_eq!(a.shape(), &[12, 64]);
        assert_eq!(a, m.map_prefix_no_skip(&store, &z).unwrap());
    }

    #[test]
    fn skip_is_additive() {
        let (m, store) = setup(16, 8);
        let z = randn(16, 2);
        let p = Tensor::new(vec![12, 8], randn(96, 3)).unwrap();
        let a = m.map_prefix(&store, &z, &p).unwrap();
        let b = m.map_prefix_no_skip(&store, &z).unwrap();
        for ((x, y), pv) in a.data().iter().zip(b.data()).zip(p.data()) {
            assert!((x - y - pv).abs() <= 1e-6);
        }
        assert_ne!(a, b);
    }

    #[test]
    fn shape_errors() {
        let (m, store) = setup(16, 8);
        assert!(matches!(m.map_prefix_no_skip(&store, &randn(15, 1)), Err(Error::Shape(_))));
        let p = Tensor::zeros(&[11, 8]);
        assert!(matches!(m.map_prefix(&store, &randn(16, 1), &p), Err(Error::Shape(_))));
        assert!(Mapper::new(MapperConfig::new(16, 10)).is_err());
    }
}
