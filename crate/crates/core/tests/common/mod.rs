//! Random models, hardware configs and subtask graphs for integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};
use ttdeploy::mapping::Mapping;
use ttdeploy::model::{Layout, ModelGraph};
use ttdeploy::partition::{Edge, Subtask, SubtaskGraph, Tile, TileKind};
use ttdeploy::reference::{Tensor, WeightStore};
use ttdeploy::timing::{CostBasis, CostEstimate, HardwareConfig, WcetOverrides};

pub fn models_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

pub struct RandomModel {
    pub graph: ModelGraph,
    pub weights: WeightStore,
}

#[derive(Clone, Copy)]
enum Shape {
    Spatial(u64, u64, u64),
    Flat(u64),
}

impl Shape {
    fn numel(self) -> u64 {
        match self {
            Shape::Spatial(h, w, c) => h * w * c,
            Shape::Flat(f) => f,
        }
    }
}

fn random_bytes(rng: &mut impl Rng, n: u64) -> Vec<i8> {
    (0..n).map(|_| rng.gen::<i8>()).collect()
}

/// A chain of 1..=max_layers layers, optionally with residual adds reaching
/// back to earlier tensors of the same shape. `relu_bias` raises the chance
/// of a ReLU directly after a Conv2D or Dense.
pub fn random_model(rng: &mut impl Rng, max_layers: usize, relu_bias: f64) -> RandomModel {
    loop {
        if let Some(m) = try_random_model(rng, max_layers, relu_bias) {
            return m;
        }
    }
}

fn try_random_model(rng: &mut impl Rng, max_layers: usize, relu_bias: f64) -> Option<RandomModel> {
    let input = if rng.gen_bool(0.75) {
        Shape::Spatial(
            rng.gen_range(2..=9),
            rng.gen_range(2..=9),
            rng.gen_range(1..=6),
        )
    } else {
        Shape::Flat(rng.gen_range(1..=48))
    };
    let dims: Vec<u64> = match input {
        Shape::Spatial(h, w, c) => vec![h, w, c],
        Shape::Flat(f) => vec![f],
    };
    let mut tensors: Vec<(String, Shape)> = vec![("input".into(), input)];
    let mut layers: Vec<Value> = Vec::new();
    let mut sizes: Vec<(String, u64)> = Vec::new();
    let mut weights = WeightStore::default();
    let n_layers = rng.gen_range(1..=max_layers);
    let mut prev_weighted = false;

    for i in 0..n_layers {
        let (cur, shape) = tensors.last().cloned().unwrap();
        let id = format!("l{i}");
        let same: Vec<String> = tensors
            .iter()
            .filter(|(_, s)| {
                s.numel() == shape.numel()
                    && std::mem::discriminant(s) == std::mem::discriminant(&shape)
            })
            .filter(|(_, s)| match (s, shape) {
                (Shape::Spatial(a, b, c), Shape::Spatial(x, y, z)) => (*a, *b, *c) == (x, y, z),
                _ => true,
            })
            .map(|(n, _)| n.clone())
            .collect();
        let pick: u32 = if prev_weighted && rng.gen_bool(relu_bias) {
            100
        } else {
            rng.gen_range(0..100)
        };
        prev_weighted = false;
        let (layer, out) = match shape {
            Shape::Spatial(h, w, c) => match pick {
                0..=39 => {
                    let k = *[1u64, 3].choose(rng).unwrap();
                    let stride = if rng.gen_bool(0.25) { 2 } else { 1 };
                    let pad = if k == 3 && rng.gen_bool(0.6) { 1 } else { 0 };
                    if h + 2 * pad < k || w + 2 * pad < k {
                        return None;
                    }
                    let oh = (h + 2 * pad - k) / stride + 1;
                    let ow = (w + 2 * pad - k) / stride + 1;
                    let cout = rng.gen_range(1..=8);
                    let wname = format!("w{i}");
                    let size = cout * k * k * c;
                    weights.insert(wname.clone(), random_bytes(rng, size));
                    sizes.push((wname.clone(), size));
                    prev_weighted = true;
                    (
                        json!({"id": id, "op": "Conv2D", "inputs": [cur], "weights": wname,
                            "attrs": {"in_channels": c, "out_channels": cout, "kernel_h": k, "kernel_w": k,
                                      "stride": stride, "padding": pad, "shift": rng.gen_range(0..=8),
                                      "relu": rng.gen_bool(0.15)}}),
                        Shape::Spatial(oh, ow, cout),
                    )
                }
                40..=51 if h >= 2 && w >= 2 => {
                    let stride = rng.gen_range(1..=2);
                    (
                        json!({"id": id, "op": "MaxPool2D", "inputs": [cur],
                            "attrs": {"window": 2, "stride": stride}}),
                        Shape::Spatial((h - 2) / stride + 1, (w - 2) / stride + 1, c),
                    )
                }
                52..=65 => {
                    let other = same.choose(rng).unwrap().clone();
                    (
                        json!({"id": id, "op": "ElementwiseAdd", "inputs": [cur, other],
                            "attrs": {"shift": rng.gen_range(0..=1)}}),
                        shape,
                    )
                }
                66..=77 => (
                    json!({"id": id, "op": "Flatten", "inputs": [cur]}),
                    Shape::Flat(h * w * c),
                ),
                78..=87 => dense(
                    rng,
                    &mut weights,
                    &mut sizes,
                    &id,
                    &cur,
                    shape.numel(),
                    &mut prev_weighted,
                ),
                _ => (json!({"id": id, "op": "ReLU", "inputs": [cur]}), shape),
            },
            Shape::Flat(f) => match pick {
                0..=49 => dense(
                    rng,
                    &mut weights,
                    &mut sizes,
                    &id,
                    &cur,
                    f,
                    &mut prev_weighted,
                ),
                50..=69 => {
                    let other = same.choose(rng).unwrap().clone();
                    (
                        json!({"id": id, "op": "ElementwiseAdd", "inputs": [cur, other],
                            "attrs": {"shift": rng.gen_range(0..=1)}}),
                        shape,
                    )
                }
                _ => (json!({"id": id, "op": "ReLU", "inputs": [cur]}), shape),
            },
        };
        layers.push(layer);
        tensors.push((id, out));
    }

    let weight_sizes: serde_json::Map<String, Value> =
        sizes.into_iter().map(|(k, v)| (k, json!(v))).collect();
    let file = json!({"input": {"dims": dims}, "layers": layers, "weight_sizes": weight_sizes});
    let graph = ModelGraph::from_json(&file.to_string()).expect("generated model is valid");
    Some(RandomModel { graph, weights })
}

fn dense(
    rng: &mut impl Rng,
    weights: &mut WeightStore,
    sizes: &mut Vec<(String, u64)>,
    id: &str,
    cur: &str,
    inf: u64,
    prev_weighted: &mut bool,
) -> (Value, Shape) {
    let out = rng.gen_range(1..=24);
    let wname = format!("w{}", &id[1..]);
    weights.insert(wname.clone(), random_bytes(rng, inf * out));
    sizes.push((wname.clone(), inf * out));
    *prev_weighted = true;
    (
        json!({"id": id, "op": "Dense", "inputs": [cur], "weights": wname,
            "attrs": {"in_features": inf, "out_features": out, "shift": rng.gen_range(0..=8),
                      "relu": rng.gen_bool(0.15)}}),
        Shape::Flat(out),
    )
}

pub fn random_input(rng: &mut impl Rng, layout: Layout) -> Tensor {
    Tensor::new(layout, random_bytes(rng, layout.numel()))
}

pub fn random_hw(rng: &mut impl Rng) -> HardwareConfig {
    HardwareConfig {
        n_cores: rng.gen_range(1..=8),
        spm_data_bytes: *[3072u64, 4096, 8192, 16384, 65536, 524288]
            .choose(rng)
            .unwrap(),
        spm_instr_bytes: 16384,
        vlen_bits: *[64u32, 128, 256, 512].choose(rng).unwrap(),
        sew_bits: 8,
        bus_bytes_per_cycle: *[1u64, 2, 4, 8, 16].choose(rng).unwrap(),
        dma_setup_cycles: rng.gen_range(1..=40),
        dram_latency_cycles: rng.gen_range(1..=60),
        gemm_c0: rng.gen_range(1..=300),
        gemm_c1: rng.gen_range(1..=4),
        stream_c1: rng.gen_range(1..=3),
        program_image_bytes: rng.gen_range(64..=4096),
        include_program_load: rng.gen_bool(0.3),
    }
}

pub fn random_overrides(rng: &mut impl Rng, n_subtasks: usize) -> WcetOverrides {
    let mut o = BTreeMap::new();
    if n_subtasks > 0 && rng.gen_bool(0.3) {
        for _ in 0..rng.gen_range(1..=3) {
            o.insert(
                rng.gen_range(1..=n_subtasks as u32),
                rng.gen_range(1..=50_000),
            );
        }
    }
    WcetOverrides(o)
}

/// Forward-edge subtask graph, one layer per subtask; every subtask loads
/// something and the last one stores.
pub fn random_subtask_graph(rng: &mut impl Rng, n: u32, edge_p: f64) -> SubtaskGraph {
    let mut edges = Vec::new();
    for j in 1..=n {
        if j == 1 || rng.gen_bool(0.6) {
            edges.push(Edge {
                src: 0,
                dst: j,
                bytes: rng.gen_range(1..=512),
            });
        }
        for i in 1..j {
            if rng.gen_bool(edge_p) {
                edges.push(Edge {
                    src: i,
                    dst: j,
                    bytes: rng.gen_range(1..=512),
                });
            }
        }
    }
    if n > 0 {
        edges.push(Edge {
            src: n,
            dst: 0,
            bytes: rng.gen_range(1..=256),
        });
    }
    SubtaskGraph {
        subtasks: (1..=n)
            .map(|id| Subtask {
                id,
                layer_id: format!("l{id}"),
                kind: TileKind::Gemm,
                k: 1,
                tile: Tile {
                    m0: 0,
                    mt: 1,
                    n0: 0,
                    nt: 1,
                },
                dram_in_bytes: 0,
                spm_footprint_bytes: 1024,
                out_bytes: 512,
            })
            .collect(),
        edges,
        layer_order: (1..=n).map(|id| format!("l{id}")).collect(),
    }
}

pub fn fixed_costs(w: &[u64]) -> BTreeMap<u32, CostEstimate> {
    w.iter()
        .enumerate()
        .map(|(i, &c)| {
            (
                i as u32 + 1,
                CostEstimate {
                    wcet_cycles: c,
                    derived_from: CostBasis::Override { analytic_cycles: c },
                },
            )
        })
        .collect()
}

pub fn explicit_mapping(cores: &[u32], n_cores: u32) -> Mapping {
    Mapping {
        n_cores,
        core_of: cores
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as u32 + 1, c))
            .collect(),
        load_cap: cores.len().div_ceil(n_cores as usize).max(1) as u32,
    }
}

/// The documented two-subtask chain on one core.
pub fn chain_example() -> (
    SubtaskGraph,
    Mapping,
    BTreeMap<u32, CostEstimate>,
    HardwareConfig,
) {
    let mut sg = SubtaskGraph {
        subtasks: Vec::new(),
        edges: [(0, 1, 100), (0, 2, 800), (1, 2, 64), (2, 0, 128)]
            .iter()
            .map(|&(src, dst, bytes)| Edge { src, dst, bytes })
            .collect(),
        layer_order: vec!["l1".into(), "l2".into()],
    };
    for (id, out) in [(1u32, 64u64), (2, 128)] {
        sg.subtasks.push(Subtask {
            id,
            layer_id: format!("l{id}"),
            kind: TileKind::Gemm,
            k: 1,
            tile: Tile {
                m0: 0,
                mt: 1,
                n0: 0,
                nt: 1,
            },
            dram_in_bytes: 0,
            spm_footprint_bytes: 1024,
            out_bytes: out,
        });
    }
    let hw = HardwareConfig {
        n_cores: 1,
        ..HardwareConfig::default()
    };
    (
        sg,
        explicit_mapping(&[0, 0], 1),
        fixed_costs(&[1000, 2000]),
        hw,
    )
}
