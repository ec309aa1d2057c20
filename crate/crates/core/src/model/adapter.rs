use std::collections::BTreeMap;

use ndarray::Array2;

use super::{signature_of, AdapterConfig, ConfigSignature, ModuleKind, ModuleSet, NamingSchema};
use crate::error::{Error, Result};
use crate::tensor_io::DType;

/// The low-rank factors adapting one projection.
///
/// `down` has shape (rank, d_in) and `up` has shape (d_out, rank); the
/// weight update is `(alpha / rank) * up * down`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    down: Array2<f32>,
    up: Array2<f32>,
    alpha: f64,
    dtype: DType,
}

impl LoraPair {
    pub fn new(down: Array2<f32>, up: Array2<f32>, alpha: f64) -> Result<Self> {
        if down.nrows() != up.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "down has {} rows but up has {} columns",
                down.nrows(),
                up.ncols()
            )));
        }
        if down.nrows() == 0 {
            return Err(Error::ShapeMismatch("rank must be at least 1".into()));
        }
        if down.ncols() == 0 || up.nrows() == 0 {
            return Err(Error::ShapeMismatch("empty input or output dimension".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::MalformedConfig(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            down,
            up,
            alpha,
            dtype: DType::F32,
        })
    }

    /// Storage dtype used when the pair is written back to disk.
    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn down(&self) -> &Array2<f32> {
        &self.down
    }

    pub fn up(&self) -> &Array2<f32> {
        &self.up
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn d_in(&self) -> usize {
        self.down.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.up.nrows()
    }

    /// alpha / rank.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// The dense update `(alpha / rank) * up * down`, shape (d_out, d_in).
    pub fn delta(&self) -> Array2<f32> {
        let mut product = self.up.dot(&self.down);
        let scale = self.scale();
        if scale != 1.0 {
            let s = scale as f32;
            product.mapv_inplace(|x| x * s);
        }
        product
    }

    pub(crate) fn scaled_up(&self, factor: f32) -> Self {
        Self {
            up: self.up.mapv(|x| x * factor),
            down: self.down.clone(),
            alpha: self.alpha,
            dtype: DType::F32,
        }
    }
}

/// Position of a pair inside an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub layer: usize,
    pub kind: ModuleKind,
}

impl Slot {
    pub fn new(layer: usize, kind: ModuleKind) -> Self {
        Self { layer, kind }
    }
}

/// A complete adapter: metadata plus one [`LoraPair`] per (layer, module).
///
/// Construction checks that every declared module is present in every layer,
/// that no undeclared module appears, and that a module kind has the same
/// (d_out, d_in) across layers. Ranks may differ between pairs. The stored
/// config has its per-module patterns cleared since the pairs carry their
/// own rank and alpha; [`Adapter::export_config`] re-derives them.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    config: AdapterConfig,
    tensors: BTreeMap<Slot, LoraPair>,
    layer_count: usize,
}

impl Adapter {
    pub fn new(mut config: AdapterConfig, tensors: BTreeMap<Slot, LoraPair>) -> Result<Self> {
        config.validate()?;
        config.rank_pattern.clear();
        config.alpha_pattern.clear();

        let layer_count = tensors.keys().map(|s| s.layer + 1).max().unwrap_or(0);
        let mut shapes: BTreeMap<ModuleKind, (usize, usize)> = BTreeMap::new();
        for (slot, pair) in &tensors {
            if !config.target_modules.contains(&slot.kind) {
                return Err(Error::OrphanTensor(format!(
                    "layer {} module {} (not in target_modules)",
                    slot.layer, slot.kind
                )));
            }
            let shape = (pair.d_out(), pair.d_in());
            match shapes.get(&slot.kind) {
                Some(&expected) if expected != shape => {
                    return Err(Error::ShapeMismatch(format!(
                        "module {} is {:?} in layer {} but {:?} elsewhere",
                        slot.kind, shape, slot.layer, expected
                    )));
                }
                _ => {
                    shapes.insert(slot.kind, shape);
                }
            }
        }
        for &kind in &config.target_modules {
            for layer in 0..layer_count.max(1) {
                if !tensors.contains_key(&Slot::new(layer, kind)) {
                    return Err(Error::MissingTensor {
                        layer,
                        kind,
                        detail: String::new(),
                    });
                }
            }
        }
        Ok(Self {
            config,
            tensors,
            layer_count,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<Slot, LoraPair> {
        &self.tensors
    }

    pub fn pair(&self, layer: usize, kind: ModuleKind) -> Option<&LoraPair> {
        self.tensors.get(&Slot::new(layer, kind))
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn modules(&self) -> &ModuleSet {
        &self.config.target_modules
    }

    pub fn signature(&self) -> ConfigSignature {
        signature_of(&self.config.target_modules)
    }

    /// (d_out, d_in) of a module kind, if the adapter targets it.
    pub fn shape_of(&self, kind: ModuleKind) -> Option<(usize, usize)> {
        self.pair(0, kind).map(|p| (p.d_out(), p.d_in()))
    }

    /// The config to write next to the weights: pairs whose rank or alpha
    /// differ from the defaults are recorded in `rank_pattern` /
    /// `alpha_pattern` so that a reader recovers the exact scaling.
    pub fn export_config(&self, schema: &NamingSchema) -> AdapterConfig {
        let mut config = self.config.clone();
        for (slot, pair) in &self.tensors {
            let key = schema.pattern_key(slot.layer, slot.kind);
            if pair.rank() != config.rank_default as usize {
                config.rank_pattern.insert(key.clone(), pair.rank() as u32);
            }
            if pair.alpha() != config.alpha_default {
                config.alpha_pattern.insert(key, pair.alpha());
            }
        }
        config
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use ModuleKind::*;

    fn pair(d_out: usize, d_in: usize, r: usize) -> LoraPair {
        LoraPair::new(Array2::ones((r, d_in)), Array2::ones((d_out, r)), r as f64).unwrap()
    }

    #[test]
    fn pair_rejects_rank_disagreement() {
        let err = LoraPair::new(Array2::zeros((2, 8)), Array2::zeros((8, 3)), 1.0).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn delta_applies_scale() {
        let p = LoraPair::new(array![[3.0]], array![[2.0]], 1.0).unwrap();
        assert_eq!(p.delta(), array![[6.0]]);
        let eye = Array2::<f32>::eye(2);
        let p = LoraPair::new(eye.clone(), eye.clone(), 2.0).unwrap();
        assert_eq!(p.delta(), eye);
        let p = LoraPair::new(array![[1.0, 2.0]], array![[1.0], [1.0], [1.0]], 4.0).unwrap();
        assert_eq!(p.delta(), array![[4.0, 8.0], [4.0, 8.0], [4.0, 8.0]]);
    }

    #[test]
    fn adapter_invariants() {
        let config = AdapterConfig::lora("m", [Q, V].into_iter().collect());
        let mut t = BTreeMap::new();
        for layer in 0..2 {
            t.insert(Slot::new(layer, Q), pair(4, 4, 2));
            t.insert(Slot::new(layer, V), pair(4, 4, 2));
        }
        let a = Adapter::new(config.clone(), t.clone()).unwrap();
        assert_eq!(a.layer_count(), 2);
        assert_eq!(a.signature().as_str(), "QV");

        let mut missing = t.clone();
        missing.remove(&Slot::new(1, V));
        assert!(matches!(
            Adapter::new(config.clone(), missing),
            Err(Error::MissingTensor { layer: 1, kind: V, .. })
        ));

        let mut orphan = t.clone();
        orphan.insert(Slot::new(0, K), pair(4, 4, 2));
        assert!(matches!(Adapter::new(config.clone(), orphan), Err(Error::OrphanTensor(_))));

        let mut uneven = t.clone();
        uneven.insert(Slot::new(1, Q), pair(4, 5, 2));
        assert!(matches!(Adapter::new(config.clone(), uneven), Err(Error::ShapeMismatch(_))));

        // rank may differ per pair
        let mut ranks = t;
        ranks.insert(Slot::new(1, Q), pair(4, 4, 7));
        assert!(Adapter::new(config.clone(), ranks).is_ok());

        assert!(matches!(
            Adapter::new(config, BTreeMap::new()),
            Err(Error::MissingTensor { layer: 0, .. })
        ));
    }

    #[test]
    fn export_config_records_deviating_pairs() {
        let mut config = AdapterConfig::lora("m", [Q].into_iter().collect());
        config.rank_default = 2;
        config.alpha_default = 2.0;
        let mut t = BTreeMap::new();
        t.insert(Slot::new(0, Q), pair(4, 4, 2));
        t.insert(Slot::new(1, Q), pair(4, 4, 5));
        let a = Adapter::new(config, t).unwrap();
        let exported = a.export_config(&NamingSchema::default());
        assert_eq!(exported.rank_pattern.len(), 1);
        assert_eq!(exported.rank_pattern["model.layers.1.self_attn.q_proj"], 5);
        assert_eq!(exported.alpha_pattern["model.layers.1.self_attn.q_proj"], 5.0);
    }
}
