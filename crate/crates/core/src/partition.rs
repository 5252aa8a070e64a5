//! GEMM lowering and tiling of compute layers into scratchpad-sized subtasks.
//!
//! Every compute layer is viewed as an `m x n` output matrix (pixels x
//! channels) with reduction length `k`. Tiles split `m` and `n` but never `k`.
//! Edge byte counts are the un-duplicated activation volume a consumer tile
//! reads from a producer tile; im2col expansion happens only inside the
//! consumer's scratchpad and is charged to its footprint, not to transfers.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Layer, Layout, ModelGraph, Op, GRAPH_INPUT};
use crate::timing::HardwareConfig;

/// Virtual node standing for external memory in [`SubtaskGraph::edges`].
pub const DRAM_NODE: u32 = 0;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("infeasible tile budget: {budget} bytes, a minimal tile needs {required}")]
pub struct InfeasibleBudget {
    pub required: u64,
    pub budget: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error(
        "layer {layer}: infeasible tile budget of {budget} bytes, minimal tile needs {required}"
    )]
    Infeasible {
        layer: String,
        required: u64,
        budget: u64,
    },
    #[error("invalid subtask graph: {0}")]
    InvalidGraph(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmDims {
    pub m: u64,
    pub n: u64,
    pub k: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TileKind {
    Gemm,
    /// k = 1 streaming op; `in_per_out` input bytes are staged per output byte.
    Stream {
        in_per_out: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tile {
    pub m0: u64,
    pub mt: u64,
    pub n0: u64,
    pub nt: u64,
}

impl Tile {
    pub fn area(&self) -> u64 {
        self.mt * self.nt
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub id: u32,
    pub layer_id: String,
    #[serde(flatten)]
    pub kind: TileKind,
    pub k: u64,
    pub tile: Tile,
    pub dram_in_bytes: u64,
    pub spm_footprint_bytes: u64,
    pub out_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: u32,
    pub dst: u32,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskGraph {
    pub subtasks: Vec<Subtask>,
    pub edges: Vec<Edge>,
    pub layer_order: Vec<String>,
}

impl SubtaskGraph {
    pub fn subtask(&self, id: u32) -> Option<&Subtask> {
        if id == DRAM_NODE {
            return None;
        }
        self.subtasks.get(id as usize - 1).filter(|s| s.id == id)
    }

    /// Edges between subtasks, excluding external-memory edges.
    pub fn internal_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges
            .iter()
            .filter(|e| e.src != DRAM_NODE && e.dst != DRAM_NODE)
    }

    pub fn dram_in(&self, id: u32) -> u64 {
        self.edges
            .iter()
            .filter(|e| e.src == DRAM_NODE && e.dst == id)
            .map(|e| e.bytes)
            .sum()
    }

    pub fn dram_out(&self, id: u32) -> u64 {
        self.edges
            .iter()
            .filter(|e| e.src == id && e.dst == DRAM_NODE)
            .map(|e| e.bytes)
            .sum()
    }

    /// Subtask ids in a topological order of the internal edges (Kahn's
    /// algorithm, smallest id first).
    pub fn topo_order(&self) -> Result<Vec<u32>, PartitionError> {
        let n = self.subtasks.len();
        let mut indeg = vec![0usize; n + 1];
        let mut succ: Vec<Vec<u32>> = vec![Vec::new(); n + 1];
        for e in self.internal_edges() {
            indeg[e.dst as usize] += 1;
            succ[e.src as usize].push(e.dst);
        }
        let mut ready: BTreeSet<u32> = (1..=n as u32).filter(|&i| indeg[i as usize] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for &s in &succ[v as usize] {
                indeg[s as usize] -= 1;
                if indeg[s as usize] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() != n {
            return Err(PartitionError::InvalidGraph("dependency cycle".into()));
        }
        Ok(order)
    }

    pub fn validate(&self) -> Result<(), PartitionError> {
        let bad = |m: String| Err(PartitionError::InvalidGraph(m));
        for (i, st) in self.subtasks.iter().enumerate() {
            if st.id as usize != i + 1 {
                return bad(format!(
                    "subtask ids must be 1..=N in order, found {}",
                    st.id
                ));
            }
            if st.tile.mt == 0 || st.tile.nt == 0 || st.k == 0 {
                return bad(format!("subtask {} has an empty tile", st.id));
            }
            if !self.layer_order.contains(&st.layer_id) {
                return bad(format!(
                    "subtask {} names unknown layer {}",
                    st.id, st.layer_id
                ));
            }
        }
        let n = self.subtasks.len() as u32;
        for e in &self.edges {
            if e.bytes == 0 {
                return bad(format!("edge {}->{} carries zero bytes", e.src, e.dst));
            }
            if e.src > n || e.dst > n || (e.src == DRAM_NODE && e.dst == DRAM_NODE) {
                return bad(format!(
                    "edge {}->{} references a missing node",
                    e.src, e.dst
                ));
            }
            if e.src == e.dst {
                return bad(format!("self edge on {}", e.src));
            }
        }
        let layer_pos = |id: u32| {
            let l = &self.subtasks[id as usize - 1].layer_id;
            self.layer_order.iter().position(|x| x == l)
        };
        for w in self.subtasks.windows(2) {
            if layer_pos(w[0].id) > layer_pos(w[1].id) {
                return bad(format!(
                    "subtask {} is numbered out of layer order",
                    w[1].id
                ));
            }
        }
        for e in self.internal_edges() {
            if e.src > e.dst || layer_pos(e.src) >= layer_pos(e.dst) {
                return bad(format!(
                    "edge {}->{} must run forward in id and layer order",
                    e.src, e.dst
                ));
            }
        }
        self.topo_order().map(|_| ())
    }
}

pub fn footprint_bytes(kind: TileKind, k: u64, mt: u64, nt: u64) -> u64 {
    match kind {
        TileKind::Gemm => mt
            .saturating_mul(k)
            .saturating_add(k.saturating_mul(nt))
            .saturating_add(mt.saturating_mul(nt).saturating_mul(4)),
        TileKind::Stream { in_per_out } => (in_per_out + 1).saturating_mul(mt).saturating_mul(nt),
    }
}

/// GEMM view of a layer: `None` for layers that move no data (Flatten).
pub fn lower_to_gemm(layer: &Layer) -> Option<GemmDims> {
    lower(layer).map(|(d, _)| d)
}

fn lower(layer: &Layer) -> Option<(GemmDims, TileKind)> {
    let (m, n) = layer.output.matrix();
    match &layer.op {
        Op::Conv2D(c) => Some((
            GemmDims {
                m,
                n,
                k: c.in_channels * c.kernel_h * c.kernel_w,
            },
            TileKind::Gemm,
        )),
        Op::Dense(d) => Some((
            GemmDims {
                m: 1,
                n: d.out_features,
                k: d.in_features,
            },
            TileKind::Gemm,
        )),
        Op::ElementwiseAdd(_) => Some((
            GemmDims { m, n, k: 1 },
            TileKind::Stream {
                in_per_out: layer.inputs.len() as u64,
            },
        )),
        Op::Relu => Some((GemmDims { m, n, k: 1 }, TileKind::Stream { in_per_out: 1 })),
        Op::MaxPool2D(p) => Some((
            GemmDims { m, n, k: 1 },
            TileKind::Stream {
                in_per_out: p.window * p.window,
            },
        )),
        Op::Flatten => None,
    }
}

/// Lane-aligned greedy tiling of a GEMM under a scratchpad budget.
pub fn tile_layer(
    dims: GemmDims,
    budget_bytes: u64,
    lanes: u64,
) -> Result<Vec<Tile>, InfeasibleBudget> {
    tile_with(dims, TileKind::Gemm, budget_bytes, lanes)
}

/// Picks the widest lane-multiple `nt` (or `n` when `n < lanes`) for which a
/// single row fits, then the tallest `mt` that fits, and emits the clipped
/// grid row-major over (m, n).
pub fn tile_with(
    dims: GemmDims,
    kind: TileKind,
    budget_bytes: u64,
    lanes: u64,
) -> Result<Vec<Tile>, InfeasibleBudget> {
    let GemmDims { m, n, k } = dims;
    assert!(
        m >= 1 && n >= 1 && k >= 1 && lanes >= 1,
        "degenerate gemm {dims:?}"
    );
    let fp = |mt, nt| footprint_bytes(kind, k, mt, nt);
    let widths: Vec<u64> = if n < lanes {
        vec![n]
    } else {
        (1..=n / lanes).rev().map(|q| q * lanes).collect()
    };
    let Some(&nt) = widths.iter().find(|&&nt| fp(1, nt) <= budget_bytes) else {
        return Err(InfeasibleBudget {
            required: fp(1, n.min(lanes)),
            budget: budget_bytes,
        });
    };
    // Largest mt with fp(mt, nt) <= budget; fp is monotone in mt.
    let (mut lo, mut hi) = (1u64, m);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fp(mid, nt) <= budget_bytes {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let mt = lo;
    let mut tiles = Vec::new();
    for m0 in (0..m).step_by(mt as usize) {
        for n0 in (0..n).step_by(nt as usize) {
            tiles.push(Tile {
                m0,
                mt: mt.min(m - m0),
                n0,
                nt: nt.min(n - n0),
            });
        }
    }
    Ok(tiles)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source<'a> {
    Input,
    Layer(&'a str),
}

/// Follows Flatten layers back to the tensor that actually holds the data.
fn resolve<'a>(g: &'a ModelGraph, mut reference: &'a str) -> (Source<'a>, bool) {
    let mut flattened = false;
    loop {
        if reference == GRAPH_INPUT {
            return (Source::Input, flattened);
        }
        let layer = g.layer(reference).expect("validated reference");
        if layer.op == Op::Flatten {
            flattened = true;
            reference = &layer.inputs[0];
        } else {
            return (Source::Layer(&layer.id), flattened);
        }
    }
}

/// What part of a source tensor, viewed as (pixels x channels), a consumer
/// tile reads.
enum Need {
    All,
    /// Pixel set given by prefix counts over the mask, restricted to a channel range.
    Pixels {
        prefix: Vec<u64>,
        ch: (u64, u64),
    },
    Rect {
        px: (u64, u64),
        ch: (u64, u64),
    },
    /// Range of flat NHWC element indices.
    Flat(u64, u64),
}

fn span(a: (u64, u64), b: (u64, u64)) -> u64 {
    a.1.min(b.1).saturating_sub(a.0.max(b.0))
}

impl Need {
    /// Bytes of the producer tile that fall inside this need.
    fn overlap(&self, t: &Tile, channels: u64) -> u64 {
        let px = (t.m0, t.m0 + t.mt);
        let ch = (t.n0, t.n0 + t.nt);
        match self {
            Need::All => t.area(),
            Need::Pixels {
                prefix,
                ch: need_ch,
            } => (prefix[px.1 as usize] - prefix[px.0 as usize]) * span(ch, *need_ch),
            Need::Rect {
                px: need_px,
                ch: need_ch,
            } => span(px, *need_px) * span(ch, *need_ch),
            Need::Flat(a, b) => {
                if a >= b {
                    return 0;
                }
                let first = px.0.max(a / channels);
                let last = (px.1 - 1).min((b - 1) / channels);
                (first..=last)
                    .map(|p| span((p * channels + ch.0, p * channels + ch.1), (*a, *b)))
                    .sum()
            }
        }
    }
}

/// Input pixels touched by the windows of output pixels `[m0, m0 + mt)`.
#[allow(clippy::too_many_arguments)]
fn window_mask(
    src: Layout,
    out: Layout,
    m0: u64,
    mt: u64,
    kh: u64,
    kw: u64,
    stride: u64,
    pad: u64,
) -> Vec<u64> {
    let (Layout::Spatial { h, w, .. }, Layout::Spatial { w: ow, .. }) = (src, out) else {
        unreachable!("windowed ops are spatial")
    };
    let mut mask = vec![false; (h * w) as usize];
    for idx in m0..m0 + mt {
        let (oy, ox) = ((idx / ow) as i64, (idx % ow) as i64);
        for ky in 0..kh as i64 {
            let iy = oy * stride as i64 - pad as i64 + ky;
            if iy < 0 || iy >= h as i64 {
                continue;
            }
            for kx in 0..kw as i64 {
                let ix = ox * stride as i64 - pad as i64 + kx;
                if ix >= 0 && ix < w as i64 {
                    mask[(iy * w as i64 + ix) as usize] = true;
                }
            }
        }
    }
    let mut prefix = Vec::with_capacity(mask.len() + 1);
    prefix.push(0);
    for m in mask {
        prefix.push(prefix.last().unwrap() + m as u64);
    }
    prefix
}

fn need_for(layer: &Layer, tile: &Tile, src: Layout, flattened: bool) -> Need {
    let (_, src_c) = src.matrix();
    match &layer.op {
        Op::Conv2D(c) => Need::Pixels {
            prefix: window_mask(
                src,
                layer.output,
                tile.m0,
                tile.mt,
                c.kernel_h,
                c.kernel_w,
                c.stride,
                c.padding,
            ),
            ch: (0, src_c),
        },
        Op::MaxPool2D(p) => Need::Pixels {
            prefix: window_mask(
                src,
                layer.output,
                tile.m0,
                tile.mt,
                p.window,
                p.window,
                p.stride,
                0,
            ),
            ch: (tile.n0, tile.n0 + tile.nt),
        },
        Op::Dense(_) => Need::All,
        Op::ElementwiseAdd(_) | Op::Relu if flattened => Need::Flat(tile.n0, tile.n0 + tile.nt),
        Op::ElementwiseAdd(_) | Op::Relu => Need::Rect {
            px: (tile.m0, tile.m0 + tile.mt),
            ch: (tile.n0, tile.n0 + tile.nt),
        },
        Op::Flatten => unreachable!("flatten has no tiles"),
    }
}

/// Tiles every compute layer with the default budget (half the data scratchpad).
pub fn build_subtask_graph(
    g: &ModelGraph,
    hw: &HardwareConfig,
) -> Result<SubtaskGraph, PartitionError> {
    build_subtask_graph_with_budget(g, hw, hw.tile_budget_bytes())
}

pub fn build_subtask_graph_with_budget(
    g: &ModelGraph,
    hw: &HardwareConfig,
    budget_bytes: u64,
) -> Result<SubtaskGraph, PartitionError> {
    let lanes = hw.lanes();
    let mut sg = SubtaskGraph::default();
    let mut tiles_of: HashMap<&str, Vec<u32>> = HashMap::new();

    for layer in &g.layers {
        let Some((dims, kind)) = lower(layer) else {
            continue;
        };
        let tiles =
            tile_with(dims, kind, budget_bytes, lanes).map_err(|e| PartitionError::Infeasible {
                layer: layer.id.clone(),
                required: e.required,
                budget: e.budget,
            })?;
        sg.layer_order.push(layer.id.clone());

        let mut sources: Vec<(Source, bool)> = Vec::new();
        for r in &layer.inputs {
            let s = resolve(g, r);
            if !sources.contains(&s) {
                sources.push(s);
            }
        }

        let mut ids = Vec::with_capacity(tiles.len());
        for tile in tiles {
            let id = sg.subtasks.len() as u32 + 1;
            let weights = match kind {
                TileKind::Gemm if layer.op.has_weights() => dims.k * tile.nt,
                _ => 0,
            };
            let mut dram_act = 0;
            let mut inbound = Vec::new();
            for &(src, flattened) in &sources {
                let src_layout = match src {
                    Source::Input => g.input,
                    Source::Layer(id) => g.layer(id).unwrap().output,
                };
                let (src_p, src_c) = src_layout.matrix();
                let need = need_for(layer, &tile, src_layout, flattened);
                match src {
                    Source::Input => {
                        let whole = Tile {
                            m0: 0,
                            mt: src_p,
                            n0: 0,
                            nt: src_c,
                        };
                        dram_act += need.overlap(&whole, src_c);
                    }
                    Source::Layer(pid) => {
                        for &ps in &tiles_of[pid] {
                            let bytes = need.overlap(&sg.subtasks[ps as usize - 1].tile, src_c);
                            if bytes > 0 {
                                inbound.push(Edge {
                                    src: ps,
                                    dst: id,
                                    bytes,
                                });
                            }
                        }
                    }
                }
            }
            let dram_in_bytes = weights + dram_act;
            if dram_in_bytes > 0 {
                sg.edges.push(Edge {
                    src: DRAM_NODE,
                    dst: id,
                    bytes: dram_in_bytes,
                });
            }
            sg.edges.extend(inbound);
            sg.subtasks.push(Subtask {
                id,
                layer_id: layer.id.clone(),
                kind,
                k: dims.k,
                tile,
                dram_in_bytes,
                spm_footprint_bytes: footprint_bytes(kind, dims.k, tile.mt, tile.nt),
                out_bytes: tile.area(),
            });
            ids.push(id);
        }
        tiles_of.insert(&layer.id, ids);
    }

    if let (Source::Layer(out), _) = resolve(g, &g.output_layer().id) {
        for &id in &tiles_of[out] {
            let bytes = sg.subtasks[id as usize - 1].out_bytes;
            sg.edges.push(Edge {
                src: id,
                dst: DRAM_NODE,
                bytes,
            });
        }
    }
    Ok(sg)
}
