//! Bottleneck adapters: residual down/up projection blocks inserted after
//! each encoder layer, their chaining (language adapter then task adapter,
//! both fed the same residual), zero-identity initialization, and on-disk
//! catalogs of trained language adapters.
//!
//! An [`Adapter`] does not own its weights; it names them. The four tensors
//! live in the [`ParamRegistry`] under `<prefix>.down.w`, `<prefix>.down.b`,
//! `<prefix>.up.w`, `<prefix>.up.b`, which lets the same adapter participate
//! in graphs, checkpoints, and freeze predicates without copies.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::ParamRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterRole {
    Language,
    Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Query,
    Document,
}

/// Handle to one adapter's parameters in a registry.
#[derive(Debug, Clone)]
pub struct Adapter {
    /// Registry name prefix, e.g. `lang.eng.layer.3`.
    pub prefix: String,
    pub hidden: usize,
    pub reduction_factor: usize,
    pub role: AdapterRole,
    /// Present iff `role == Language`.
    pub language_tag: Option<String>,
}

impl Adapter {
    pub fn bottleneck(&self) -> usize {
        self.hidden / self.reduction_factor
    }

    pub fn down_weight(&self) -> String {
        format!("{}.down.w", self.prefix)
    }

    pub fn down_bias(&self) -> String {
        format!("{}.down.b", self.prefix)
    }

    pub fn up_weight(&self) -> String {
        format!("{}.up.w", self.prefix)
    }

    pub fn up_bias(&self) -> String {
        format!("{}.up.b", self.prefix)
    }

    /// Scalar parameter count: down h×(h/r) + bias h/r + up (h/r)×h + bias h.
    pub fn param_count(&self) -> usize {
        let b = self.bottleneck();
        2 * self.hidden * b + b + self.hidden
    }
}

/// Total adapter parameters across a stack of layers.
pub fn count_adapter_params(hidden: usize, reduction_factor: usize, layers: usize) -> usize {
    debug_assert_eq!(hidden % reduction_factor, 0);
    let b = hidden / reduction_factor;
    layers * (2 * hidden * b + b + hidden)
}

/// Register a fresh adapter. The down-projection draws from the registry's
/// seeded stream for its own name; the up-projection and both biases start at
/// zero, so a fresh adapter maps any `(h, r)` to exactly `r`.
pub fn init_adapter(
    registry: &mut ParamRegistry,
    prefix: &str,
    hidden: usize,
    reduction_factor: usize,
    role: AdapterRole,
    language_tag: Option<&str>,
) -> Result<Adapter> {
    if reduction_factor == 0 || hidden % reduction_factor != 0 {
        return Err(Error::Config(format!(
            "adapter hidden size {hidden} is not divisible by reduction factor {reduction_factor}"
        )));
    }
    let adapter = Adapter {
        prefix: prefix.to_string(),
        hidden,
        reduction_factor,
        role,
        language_tag: language_tag.map(str::to_string),
    };
    let b = adapter.bottleneck();
    registry.add_weight(&adapter.down_weight(), hidden, b)?;
    registry.add_zeros(&adapter.down_bias(), b)?;
    registry.add_zero_weight(&adapter.up_weight(), b, hidden)?;
    registry.add_zeros(&adapter.up_bias(), hidden)?;
    Ok(adapter)
}

/// Register one adapter per layer under `<prefix>.layer.<l>`.
pub fn init_adapter_set(
    registry: &mut ParamRegistry,
    prefix: &str,
    hidden: usize,
    reduction_factor: usize,
    layers: usize,
    role: AdapterRole,
    language_tag: Option<&str>,
) -> Result<Vec<Adapter>> {
    (0..layers)
        .map(|l| {
            init_adapter(
                registry,
                &format!("{prefix}.layer.{l}"),
                hidden,
                reduction_factor,
                role,
                language_tag,
            )
        })
        .collect()
}

/// Rebuild the per-layer handles for an already-registered adapter set.
pub fn adapter_set_handles(
    prefix: &str,
    hidden: usize,
    reduction_factor: usize,
    layers: usize,
    role: AdapterRole,
    language_tag: Option<&str>,
) -> Vec<Adapter> {
    (0..layers)
        .map(|l| Adapter {
            prefix: format!("{prefix}.layer.{l}"),
            hidden,
            reduction_factor,
            role,
            language_tag: language_tag.map(str::to_string),
        })
        .collect()
}

/// One adapter application: `up(relu(down(h))) + r`.
pub fn adapter_forward(
    g: &mut Graph,
    registry: &ParamRegistry,
    adapter: &Adapter,
    h_l: NodeId,
    r_l: NodeId,
) -> Result<NodeId> {
    let dh = g.value(h_l).dim();
    let dr = g.value(r_l).dim();
    if dh != dr {
        return Err(Error::shape("adapter_forward", &[dh.0, dh.1], &[dr.0, dr.1]));
    }
    if dh.1 != adapter.hidden {
        return Err(Error::shape(
            format!("adapter_forward width for '{}'", adapter.prefix),
            &[dh.0, dh.1],
            &[dh.0, adapter.hidden],
        ));
    }
    let dw = g.param(registry, &adapter.down_weight())?;
    let db = g.param(registry, &adapter.down_bias())?;
    let uw = g.param(registry, &adapter.up_weight())?;
    let ub = g.param(registry, &adapter.up_bias())?;
    let down = g.affine(h_l, dw, db)?;
    let act = g.relu(down);
    let up = g.affine(act, uw, ub)?;
    g.add(up, r_l)
}

/// Per-layer adapter slots for one encoder side. Either slot may be empty:
/// no language adapter is the ablation condition, no task adapter is the
/// untrained baseline, and both empty reduces each layer to a plain residual
/// add.
#[derive(Debug, Clone)]
pub struct AdapterChain {
    pub side: Side,
    language: Vec<Option<Adapter>>,
    task: Vec<Option<Adapter>>,
}

impl AdapterChain {
    pub fn empty(side: Side, layers: usize) -> Self {
        AdapterChain {
            side,
            language: vec![None; layers],
            task: vec![None; layers],
        }
    }

    pub fn layers(&self) -> usize {
        self.language.len()
    }

    pub fn with_language_set(mut self, adapters: Vec<Adapter>) -> Result<Self> {
        if adapters.len() != self.layers() {
            return Err(Error::shape(
                "language adapter set",
                &[self.layers()],
                &[adapters.len()],
            ));
        }
        self.language = adapters.into_iter().map(Some).collect();
        Ok(self)
    }

    pub fn with_task_set(mut self, adapters: Vec<Adapter>) -> Result<Self> {
        if adapters.len() != self.layers() {
            return Err(Error::shape(
                "task adapter set",
                &[self.layers()],
                &[adapters.len()],
            ));
        }
        self.task = adapters.into_iter().map(Some).collect();
        Ok(self)
    }

    pub fn clear_language_set(&mut self) {
        self.language = vec![None; self.layers()];
    }

    pub fn set_language_set(&mut self, adapters: Vec<Adapter>) -> Result<()> {
        if adapters.len() != self.layers() {
            return Err(Error::shape(
                "language adapter set",
                &[self.layers()],
                &[adapters.len()],
            ));
        }
        self.language = adapters.into_iter().map(Some).collect();
        Ok(())
    }

    pub fn language_at(&self, layer: usize) -> Option<&Adapter> {
        self.language[layer].as_ref()
    }

    pub fn task_at(&self, layer: usize) -> Option<&Adapter> {
        self.task[layer].as_ref()
    }

    /// Tag of the installed language adapter set, if any.
    pub fn language_tag(&self) -> Option<&str> {
        self.language
            .iter()
            .flatten()
            .next()
            .and_then(|a| a.language_tag.as_deref())
    }

    pub fn is_empty_at(&self, layer: usize) -> bool {
        self.language[layer].is_none() && self.task[layer].is_none()
    }
}

/// Apply one layer's chain: language adapter first, then task adapter, both
/// receiving the *same* residual `r_l`. An empty chain is the plain residual
/// connection `h_l + r_l`.
pub fn chain_forward(
    g: &mut Graph,
    registry: &ParamRegistry,
    chain: &AdapterChain,
    layer: usize,
    h_l: NodeId,
    r_l: NodeId,
) -> Result<NodeId> {
    if chain.is_empty_at(layer) {
        return g.add(h_l, r_l);
    }
    let mut x = h_l;
    if let Some(la) = chain.language_at(layer) {
        x = adapter_forward(g, registry, la, x, r_l)?;
    }
    if let Some(ta) = chain.task_at(layer) {
        x = adapter_forward(g, registry, ta, x, r_l)?;
    }
    Ok(x)
}

/// Metadata sidecar stored next to each adapter checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub role: AdapterRole,
    pub language_tag: Option<String>,
    pub reduction_factor: usize,
    pub hidden: usize,
    pub layers: usize,
}

/// Directory of trained language adapter sets, one checkpoint + JSON sidecar
/// pair per language tag.
pub struct AdapterCatalog;

impl AdapterCatalog {
    fn ckpt_path(dir: &Path, tag: &str) -> std::path::PathBuf {
        dir.join(format!("{tag}.ckpt"))
    }

    fn meta_path(dir: &Path, tag: &str) -> std::path::PathBuf {
        dir.join(format!("{tag}.json"))
    }

    /// Write the language adapter set `lang.<tag>.*` from the registry.
    pub fn save_language_set(
        registry: &ParamRegistry,
        dir: &Path,
        tag: &str,
        meta: &AdapterMeta,
    ) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let prefix = format!("lang.{tag}.");
        checkpoint::save_where(registry, Self::ckpt_path(dir, tag), |n| n.starts_with(&prefix))?;
        let json = serde_json::to_string_pretty(meta).expect("meta serializes");
        std::fs::write(Self::meta_path(dir, tag), json)?;
        Ok(())
    }

    pub fn available_tags(dir: &Path) -> Vec<String> {
        let mut tags: Vec<String> = std::fs::read_dir(dir)
            .map(|entries| {
                entries
                    .flatten()
                    .filter_map(|e| {
                        let name = e.file_name().into_string().ok()?;
                        name.strip_suffix(".json").map(str::to_string)
                    })
                    .collect()
            })
            .unwrap_or_default();
        tags.sort();
        tags
    }

    /// Load the set for `tag` into the registry (parameters must not already
    /// exist) and return per-layer handles.
    pub fn load_language_set(
        registry: &mut ParamRegistry,
        dir: &Path,
        tag: &str,
    ) -> Result<Vec<Adapter>> {
        let meta_path = Self::meta_path(dir, tag);
        if !meta_path.exists() {
            return Err(Error::lookup(
                "language adapter",
                tag,
                Self::available_tags(dir),
            ));
        }
        let meta: AdapterMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
            .map_err(|e| Error::Format {
                path: meta_path.display().to_string(),
                message: e.to_string(),
            })?;
        registry.absorb_records(checkpoint::load(Self::ckpt_path(dir, tag))?)?;
        Ok(adapter_set_handles(
            &format!("lang.{tag}"),
            meta.hidden,
            meta.reduction_factor,
            meta.layers,
            meta.role,
            meta.language_tag.as_deref(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::Rng;

    use crate::rng::stream;
    use crate::tensor::ParamTensor;

    fn set_values(reg: &mut ParamRegistry, name: &str, v: Array2<f64>) {
        *reg.get_mut(name).unwrap().values_mut() = v;
    }

    #[test]
    fn fresh_adapter_is_identity_on_residual() {
        let mut reg = ParamRegistry::new(3);
        let a = init_adapter(&mut reg, "t", 8, 4, AdapterRole::Task, None).unwrap();
        let mut rng = stream(0, "test:add");
        let h = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-2.0..2.0));
        let r = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-2.0..2.0));
        let mut g = Graph::new();
        let hn = g.input(h);
        let rn = g.input(r.clone());
        let out = adapter_forward(&mut g, &reg, &a, hn, rn).unwrap();
        // Exact float equality: zero up-projection contributes exactly +0.0.
        assert_eq!(g.value(out), &r);
    }

    #[test]
    fn hand_evaluated_two_wide_adapter() {
        let mut reg = ParamRegistry::new(0);
        let a = init_adapter(&mut reg, "t", 2, 2, AdapterRole::Task, None).unwrap();
        set_values(&mut reg, "t.down.w", array![[1.0], [1.0]]);
        set_values(&mut reg, "t.up.w", array![[1.0, 0.0]]);
        let mut g = Graph::new();
        let h = g.input(array![[1.0, 2.0]]);
        let r = g.input(array![[0.5, 0.5]]);
        let out = adapter_forward(&mut g, &reg, &a, h, r).unwrap();
        assert_eq!(g.value(out), &array![[3.5, 0.5]]);
    }

    #[test]
    fn relu_kills_negative_bottleneck() {
        let mut reg = ParamRegistry::new(0);
        let a = init_adapter(&mut reg, "t", 2, 2, AdapterRole::Task, None).unwrap();
        set_values(&mut reg, "t.down.w", array![[1.0], [1.0]]);
        set_values(&mut reg, "t.up.w", array![[1.0, 1.0]]);
        let mut g = Graph::new();
        let h = g.input(array![[-1.0, -2.0]]);
        let r = g.input(array![[0.25, 0.75]]);
        let out = adapter_forward(&mut g, &reg, &a, h, r).unwrap();
        assert_eq!(g.value(out), &array![[0.25, 0.75]]);
    }

    #[test]
    fn width_mismatch_is_a_dimension_error() {
        let mut reg = ParamRegistry::new(0);
        let a = init_adapter(&mut reg, "t", 8, 4, AdapterRole::Task, None).unwrap();
        let mut g = Graph::new();
        let h = g.input(Array2::zeros((2, 6)));
        let r = g.input(Array2::zeros((2, 6)));
        assert!(matches!(
            adapter_forward(&mut g, &reg, &a, h, r),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn empty_chain_is_residual_passthrough() {
        let reg = ParamRegistry::new(0);
        let chain = AdapterChain::empty(Side::Query, 1);
        let mut g = Graph::new();
        let h = g.input(array![[1.0, 1.0]]);
        let r = g.input(array![[2.0, 2.0]]);
        let out = chain_forward(&mut g, &reg, &chain, 0, h, r).unwrap();
        assert_eq!(g.value(out), &array![[3.0, 3.0]]);
    }

    #[test]
    fn composed_fresh_adapters_return_residual() {
        let mut reg = ParamRegistry::new(5);
        let la = init_adapter_set(&mut reg, "lang.eng", 4, 2, 1, AdapterRole::Language, Some("eng")).unwrap();
        let ta = init_adapter_set(&mut reg, "task.q", 4, 2, 1, AdapterRole::Task, None).unwrap();
        let chain = AdapterChain::empty(Side::Query, 1)
            .with_language_set(la)
            .unwrap()
            .with_task_set(ta)
            .unwrap();
        let mut g = Graph::new();
        let h = g.input(array![[1.0, -2.0, 3.0, -4.0]]);
        let r = g.input(array![[0.1, 0.2, 0.3, 0.4]]);
        let out = chain_forward(&mut g, &reg, &chain, 0, h, r).unwrap();
        assert_eq!(g.value(out), &array![[0.1, 0.2, 0.3, 0.4]]);
    }

    #[test]
    fn trained_language_adapter_with_fresh_task_adapter_returns_language_output() {
        // Language adapter from the hand example; task adapter still fresh:
        // the chain output equals TA(LA_out, r) = r (zero up), per
        // composition of the two residual forms.
        let mut reg = ParamRegistry::new(0);
        let la = init_adapter(&mut reg, "lang.x.layer.0", 2, 2, AdapterRole::Language, Some("x")).unwrap();
        set_values(&mut reg, "lang.x.layer.0.down.w", array![[1.0], [1.0]]);
        set_values(&mut reg, "lang.x.layer.0.up.w", array![[1.0, 0.0]]);
        let ta = init_adapter(&mut reg, "task.q.layer.0", 2, 2, AdapterRole::Task, None).unwrap();
        let chain = AdapterChain::empty(Side::Query, 1)
            .with_language_set(vec![la])
            .unwrap()
            .with_task_set(vec![ta])
            .unwrap();
        let mut g = Graph::new();
        let h = g.input(array![[1.0, 2.0]]);
        let r = g.input(array![[0.5, 0.5]]);
        let out = chain_forward(&mut g, &reg, &chain, 0, h, r).unwrap();
        assert_eq!(g.value(out), &array![[0.5, 0.5]]);
    }

    #[test]
    fn init_rejects_non_divisible_reduction() {
        let mut reg = ParamRegistry::new(0);
        assert!(matches!(
            init_adapter(&mut reg, "t", 10, 3, AdapterRole::Task, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(count_adapter_params(32, 16, 1), 162);
        assert_eq!(count_adapter_params(768, 16, 12), 894_528);
        assert_eq!(count_adapter_params(768, 2, 12), 7_091_712);
        assert_eq!(count_adapter_params(768, 768, 1), 2_305);
    }

    #[test]
    fn param_count_matches_registry_enumeration() {
        for (h, r, layers) in [(8, 2, 3), (16, 4, 2), (32, 16, 1), (64, 2, 4)] {
            let mut reg = ParamRegistry::new(1);
            init_adapter_set(&mut reg, "set", h, r, layers, AdapterRole::Task, None).unwrap();
            let brute: usize = reg
                .iter()
                .filter(|p| p.name().starts_with("set."))
                .map(ParamTensor::count)
                .sum();
            assert_eq!(brute, count_adapter_params(h, r, layers));
        }
    }

    #[test]
    fn same_seed_inits_are_bit_identical() {
        let make = || {
            let mut reg = ParamRegistry::new(77);
            init_adapter(&mut reg, "t", 16, 4, AdapterRole::Task, None).unwrap();
            reg.checksum()
        };
        assert_eq!(make(), make());
    }

    /// The adapter's contribution beyond the residual lives in the row space
    /// of the up-projection, so its rank is at most the bottleneck width.
    #[test]
    fn residual_delta_has_bottleneck_rank() {
        let (h, r) = (6, 3); // bottleneck 2
        let mut reg = ParamRegistry::new(9);
        let a = init_adapter(&mut reg, "t", h, r, AdapterRole::Task, None).unwrap();
        // Give the up-projection full (bottleneck) rank so the bound is tight.
        let mut rng = stream(9, "test:up");
        set_values(
            &mut reg,
            "t.up.w",
            Array2::from_shape_fn((2, h), |_| rng.gen_range(-1.0..1.0)),
        );
        let hm = Array2::from_shape_fn((8, h), |_| rng.gen_range(0.5..2.0));
        let rm = Array2::from_shape_fn((8, h), |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let hn = g.input(hm);
        let rn = g.input(rm.clone());
        let out = adapter_forward(&mut g, &reg, &a, hn, rn).unwrap();
        let delta = g.value(out) - &rm;
        assert_eq!(numeric_rank(&delta, 1e-9), 2);
    }

    fn numeric_rank(m: &Array2<f64>, tol: f64) -> usize {
        let mut a = m.clone();
        let (rows, cols) = a.dim();
        let mut rank = 0;
        let mut row = 0;
        for col in 0..cols {
            let pivot = (row..rows).max_by(|&i, &j| {
                a[[i, col]].abs().partial_cmp(&a[[j, col]].abs()).unwrap()
            });
            let Some(p) = pivot else { break };
            if a[[p, col]].abs() < tol {
                continue;
            }
            for c in 0..cols {
                let tmp = a[[row, c]];
                a[[row, c]] = a[[p, c]];
                a[[p, c]] = tmp;
            }
            for i in (row + 1)..rows {
                let f = a[[i, col]] / a[[row, col]];
                for c in 0..cols {
                    a[[i, c]] -= f * a[[row, c]];
                }
            }
            rank += 1;
            row += 1;
            if row == rows {
                break;
            }
        }
        rank
    }

    #[test]
    fn catalog_roundtrip_and_unknown_tag() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = ParamRegistry::new(4);
        init_adapter_set(&mut reg, "lang.eng", 8, 2, 2, AdapterRole::Language, Some("eng")).unwrap();
        let meta = AdapterMeta {
            role: AdapterRole::Language,
            language_tag: Some("eng".into()),
            reduction_factor: 2,
            hidden: 8,
            layers: 2,
        };
        AdapterCatalog::save_language_set(&reg, dir.path(), "eng", &meta).unwrap();

        let mut fresh = ParamRegistry::new(4);
        let handles = AdapterCatalog::load_language_set(&mut fresh, dir.path(), "eng").unwrap();
        assert_eq!(handles.len(), 2);
        assert_eq!(
            fresh.checksum_where(|n| n.starts_with("lang.eng.")),
            reg.checksum_where(|n| n.starts_with("lang.eng."))
        );

        let err = AdapterCatalog::load_language_set(&mut fresh, dir.path(), "deu").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("deu") && msg.contains("eng"), "{msg}");
    }
}
