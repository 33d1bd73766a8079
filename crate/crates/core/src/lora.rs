//! Low-rank adaptation of frozen linear maps.
//!
//! An adapted map computes `W·x + b + (alpha/rank)·B·(A·x)` where `A` is
//! `rank × d_in` and `B` is `d_out × rank`. `B` starts at zero so an adapter is
//! an exact no-op until it is trained. Adapter tensors are stored next to the
//! base map as `<name>.lora_a` and `<name>.lora_b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LinearMap;
use crate::params::{matches_any, Initializer, ParamStore, INIT_STD};
use crate::tensor::{kernels, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Glob patterns over linear map names.
    pub target_selectors: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 32.0,
            target_selectors: vec!["lm.blocks.*.attn.q".into(), "lm.blocks.*.attn.v".into()],
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scaling: f64,
}

pub fn lora_a_name(base: &str) -> String {
    format!("{base}.lora_a")
}

pub fn lora_b_name(base: &str) -> String {
    format!("{base}.lora_b")
}

impl LoraAdapter {
    /// Base output plus the scaled low-rank correction.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, base: &LinearMap, x: Var) -> Result<Var> {
        let y = base.base_forward(tape, store, x)?;
        let a = tape.param(store, &lora_a_name(&base.name))?;
        let b = tape.param(store, &lora_b_name(&base.name))?;
        let h = tape.linear(x, a, None)?;
        let delta = tape.linear(h, b, None)?;
        let delta = tape.scale(delta, self.scaling)?;
        tape.add(y, delta)
    }
}

/// Attaches adapters to every map whose name matches a selector.
///
/// All existing parameters in `store` are frozen; the new `A`/`B` tensors are
/// the only trainable ones afterwards. Returns the number of adapted maps.
pub fn attach<'a>(
    maps: impl IntoIterator<Item = &'a mut LinearMap>,
    store: &mut ParamStore,
    cfg: &LoraConfig,
    init: &mut Initializer,
) -> Result<usize> {
    if cfg.rank == 0 || cfg.alpha.is_nan() || cfg.alpha <= 0.0 {
        return Err(Error::Config("lora rank and alpha must be positive".into()));
    }
    let mut available = Vec::new();
    let mut targets = Vec::new();
    for map in maps {
        available.push(map.name.clone());
        if matches_any(&cfg.target_selectors, &map.name) {
            targets.push(map);
        }
    }
    if targets.is_empty() {
        return Err(Error::Config(format!(
            "lora selectors {:?} match no linear map; available: {}",
            cfg.target_selectors,
            available.join(", ")
        )));
    }
    for map in &targets {
        if map.adapter.is_some() {
            return Err(Error::Config(format!("`{}` already has an adapter", map.name)));
        }
        if cfg.rank > map.d_in.min(map.d_out) {
            return Err(Error::Config(format!(
                "lora rank {} exceeds min(d_in, d_out) of `{}` ({}x{})",
                cfg.rank, map.name, map.d_out, map.d_in
            )));
        }
    }
    store.freeze_all();
    let n = targets.len();
    for map in targets {
        store.insert(
            lora_a_name(&map.name),
            init.normal(&[cfg.rank, map.d_in], INIT_STD).with_requires_grad(true),
        )?;
        store.insert(
            lora_b_name(&map.name),
            Tensor::zeros(&[map.d_out, cfg.rank]).with_requires_grad(true),
        )?;
        map.adapter = Some(LoraAdapter {
            rank: cfg.rank,
            scaling: cfg.scaling(),
        });
    }
    Ok(n)
}

/// Folds the adapter into the base weight (`W + scaling·B·A`), removes the
/// adapter tensors and detaches the adapter. Fails if no adapter is attached.
pub fn merge(map: &mut LinearMap, store: &mut ParamStore) -> Result<LinearMap> {
    let adapter = map
        .adapter
        .take()
        .ok_or_else(|| Error::Contract(format!("`{}` has no attached adapter to merge", map.name)))?;
    let a = store
        .remove(&lora_a_name(&map.name))
        .ok_or_else(|| Error::Contract(format!("missing lora_a for `{}`", map.name)))?;
    let b = store
        .remove(&lora_b_name(&map.name))
        .ok_or_else(|| Error::Contract(format!("missing lora_b for `{}`", map.name)))?;
    let w = store.require_mut(&map.weight_name())?;
    let mut delta = vec![0.0; map.d_out * map.d_in];
    kernels::matmul_acc(b.data(), a.data(), &mut delta, map.d_out, adapter.rank, map.d_in);
    for (wi, di) in w.data_mut().iter_mut().zip(&delta) {
        *wi += adapter.scaling * di;
    }
    Ok(map.clone())
}

/// Trainable tensors, in name order.
pub fn trainable_parameters(store: &ParamStore) -> Vec<(&str, &Tensor)> {
    store.iter().filter(|(_, t)| t.requires_grad()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_map(d_in: usize, d_out: usize) -> (LinearMap, ParamStore, Initializer) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(7);
        let map = LinearMap::init(&mut store, &mut init, "m", d_in, d_out, true).unwrap();
        (map, store, init)
    }

    #[test]
    fn rank8_alpha32_scaling() {
        let cfg = LoraConfig::default();
        assert_eq!(cfg.rank, 8);
        assert_eq!(cfg.alpha, 32.0);
        assert_eq!(cfg.scaling(), 4.0);
    }

    #[test]
    fn zero_matches_lists_names() {
        let (mut map, mut store, mut init) = single_map(4, 4);
        let cfg = LoraConfig {
            rank: 2,
            alpha: 4.0,
            target_selectors: vec!["nothing".into()],
        };
        let err = attach([&mut map], &mut store, &cfg, &mut init).unwrap_err();
        assert!(err.to_string().contains("available: m"), "{err}");
    }

    #[test]
    fn rank_bounded_by_map() {
        let (mut map, mut store, mut init) = single_map(3, 5);
        let cfg = LoraConfig {
            rank: 4,
            alpha: 8.0,
            target_selectors: vec!["m".into()],
        };
        assert!(attach([&mut map], &mut store, &cfg, &mut init).is_err());
    }

    #[test]
    fn attach_freezes_base_and_counts_trainables() {
        let (mut map, mut store, mut init) = single_map(6, 5);
        let cfg = LoraConfig {
            rank: 2,
            alpha: 4.0,
            target_selectors: vec!["m".into()],
        };
        assert_eq!(attach([&mut map], &mut store, &cfg, &mut init).unwrap(), 1);
        let names: Vec<&str> = trainable_parameters(&store).iter().map(|(n, _)| *n).collect();
        assert_eq!(names, ["m.lora_a", "m.lora_b"]);
        assert_eq!(store.count().1, 2 * (6 + 5));
    }

    #[test]
    fn hand_computed_rank_one() {
        let mut store = ParamStore::new();
        store.insert("m.weight", Tensor::zeros(&[2, 2])).unwrap();
        store
            .insert("m.lora_a", Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        store
            .insert("m.lora_b", Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap())
            .unwrap();
        let adapter = LoraAdapter { rank: 1, scaling: 4.0 };
        let map = LinearMap {
            name: "m".into(),
            d_in: 2,
            d_out: 2,
            has_bias: false,
            adapter: Some(adapter),
        };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap());
        let y = map.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), &[12.0, 0.0]);
    }

    #[test]
    fn merge_twice_rejected() {
        let (mut map, mut store, mut init) = single_map(4, 4);
        let cfg = LoraConfig {
            rank: 2,
            alpha: 4.0,
            target_selectors: vec!["m".into()],
        };
        attach([&mut map], &mut store, &cfg, &mut init).unwrap();
        let before = store.get("m.weight").unwrap().clone();
        merge(&mut map, &mut store).unwrap();
        // B was zero, so the merged weight is the base weight exactly.
        assert_eq!(store.get("m.weight").unwrap().data(), before.data());
        assert!(!store.contains("m.lora_a"));
        assert!(matches!(merge(&mut map, &mut store), Err(Error::Contract(_))));
    }
}
