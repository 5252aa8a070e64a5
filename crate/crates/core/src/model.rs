//! Layer graph for int8 CNNs: file format, validation, shape inference and
//! operator fusion.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Reserved reference naming the graph input tensor in a layer's `inputs`.
pub const GRAPH_INPUT: &str = "input";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("empty graph")]
    EmptyGraph,
    #[error("bad graph input: {0}")]
    BadInput(String),
    #[error("duplicate layer id {0}")]
    DuplicateId(String),
    #[error("unknown op {op:?} at {layer}")]
    UnknownOp { layer: String, op: String },
    #[error("bad attributes at {layer}: {detail}")]
    BadAttr { layer: String, detail: String },
    #[error("dangling reference at {layer}: {reference:?} does not exist")]
    DanglingRef { layer: String, reference: String },
    #[error("cycle through {layer}")]
    Cycle { layer: String },
    #[error("shape mismatch at {layer}: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("weights error at {layer}: {detail}")]
    Weights { layer: String, detail: String },
    #[error("graph must have exactly one output layer, found {0:?}")]
    Outputs(Vec<String>),
}

impl ModelError {
    /// Layer the error is attributed to, if any.
    pub fn layer(&self) -> Option<&str> {
        match self {
            ModelError::UnknownOp { layer, .. }
            | ModelError::BadAttr { layer, .. }
            | ModelError::DanglingRef { layer, .. }
            | ModelError::Cycle { layer }
            | ModelError::ShapeMismatch { layer, .. }
            | ModelError::Weights { layer, .. } => Some(layer),
            ModelError::DuplicateId(id) => Some(id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub dims: Vec<u64>,
    pub elem_bytes: u64,
}

/// Canonical view of an activation tensor: NHWC with N = 1, or a flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Spatial { h: u64, w: u64, c: u64 },
    Flat { f: u64 },
}

impl Layout {
    /// (pixels, channels): the row/column extents of the tensor viewed as a matrix.
    pub fn matrix(&self) -> (u64, u64) {
        match *self {
            Layout::Spatial { h, w, c } => (h * w, c),
            Layout::Flat { f } => (1, f),
        }
    }

    pub fn numel(&self) -> u64 {
        let (p, c) = self.matrix();
        p * c
    }

    pub fn shape(&self) -> TensorShape {
        match *self {
            Layout::Spatial { h, w, c } => TensorShape::int8(vec![1, h, w, c]),
            Layout::Flat { f } => TensorShape::int8(vec![f]),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layout::Spatial { h, w, c } => write!(f, "{h}x{w}x{c}"),
            Layout::Flat { f: n } => write!(f, "[{n}]"),
        }
    }
}

impl TensorShape {
    pub fn int8(dims: Vec<u64>) -> Self {
        TensorShape {
            dims,
            elem_bytes: 1,
        }
    }

    /// Byte size, or `None` if any dim is zero or the size overflows 63 bits.
    pub fn byte_size(&self) -> Option<u64> {
        if self.dims.is_empty() || self.dims.contains(&0) || self.elem_bytes == 0 {
            return None;
        }
        let mut acc = self.elem_bytes;
        for &d in &self.dims {
            acc = acc.checked_mul(d)?;
        }
        (acc <= i64::MAX as u64).then_some(acc)
    }

    pub fn layout(&self) -> Result<Layout, String> {
        if self.byte_size().is_none() {
            return Err(format!("invalid dims {:?}", self.dims));
        }
        match self.dims.as_slice() {
            [f] => Ok(Layout::Flat { f: *f }),
            [1, f] => Ok(Layout::Flat { f: *f }),
            [h, w, c] => Ok(Layout::Spatial {
                h: *h,
                w: *w,
                c: *c,
            }),
            [1, h, w, c] => Ok(Layout::Spatial {
                h: *h,
                w: *w,
                c: *c,
            }),
            [n, _, _, _] => Err(format!("batch size {n} unsupported")),
            d => Err(format!("unsupported rank for dims {d:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv2d {
    pub in_channels: u64,
    pub out_channels: u64,
    pub kernel_h: u64,
    pub kernel_w: u64,
    #[serde(default = "one")]
    pub stride: u64,
    #[serde(default)]
    pub padding: u64,
    #[serde(default)]
    pub shift: u32,
    /// Fused ReLU epilogue.
    #[serde(default, skip_serializing_if = "is_false")]
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dense {
    pub in_features: u64,
    pub out_features: u64,
    #[serde(default)]
    pub shift: u32,
    #[serde(default, skip_serializing_if = "is_false")]
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pool {
    pub window: u64,
    #[serde(default = "one")]
    pub stride: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AddAttrs {
    #[serde(default)]
    pub shift: u32,
}

fn one() -> u64 {
    1
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Conv2D(Conv2d),
    Dense(Dense),
    Relu,
    ElementwiseAdd(AddAttrs),
    MaxPool2D(Pool),
    Flatten,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2D(_) => "Conv2D",
            Op::Dense(_) => "Dense",
            Op::Relu => "ReLU",
            Op::ElementwiseAdd(_) => "ElementwiseAdd",
            Op::MaxPool2D(_) => "MaxPool2D",
            Op::Flatten => "Flatten",
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, Op::Conv2D(_) | Op::Dense(_))
    }

    fn parse(layer: &str, op: &str, attrs: &Value) -> Result<Op, ModelError> {
        let bad = |e: serde_json::Error| ModelError::BadAttr {
            layer: layer.to_string(),
            detail: e.to_string(),
        };
        let empty = |name: &str| -> Result<(), ModelError> {
            match attrs {
                Value::Null => Ok(()),
                Value::Object(m) if m.is_empty() => Ok(()),
                _ => Err(ModelError::BadAttr {
                    layer: layer.to_string(),
                    detail: format!("{name} takes no attributes"),
                }),
            }
        };
        let attrs_or_empty = if attrs.is_null() {
            Value::Object(Default::default())
        } else {
            attrs.clone()
        };
        Ok(match op {
            "Conv2D" => Op::Conv2D(serde_json::from_value(attrs_or_empty).map_err(bad)?),
            "Dense" => Op::Dense(serde_json::from_value(attrs_or_empty).map_err(bad)?),
            "MaxPool2D" => Op::MaxPool2D(serde_json::from_value(attrs_or_empty).map_err(bad)?),
            "ElementwiseAdd" => {
                Op::ElementwiseAdd(serde_json::from_value(attrs_or_empty).map_err(bad)?)
            }
            "ReLU" => {
                empty("ReLU")?;
                Op::Relu
            }
            "Flatten" => {
                empty("Flatten")?;
                Op::Flatten
            }
            other => {
                return Err(ModelError::UnknownOp {
                    layer: layer.to_string(),
                    op: other.to_string(),
                })
            }
        })
    }

    fn attrs_json(&self) -> Value {
        match self {
            Op::Conv2D(a) => serde_json::to_value(a),
            Op::Dense(a) => serde_json::to_value(a),
            Op::MaxPool2D(a) => serde_json::to_value(a),
            Op::ElementwiseAdd(a) => serde_json::to_value(a),
            Op::Relu | Op::Flatten => Ok(Value::Object(Default::default())),
        }
        .expect("attribute structs serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub weights: Option<String>,
    /// Inferred output layout.
    pub output: Layout,
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub dims: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub op: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub attrs: Value,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
}

/// On-disk model description. `weight_sizes` keeps its key order: the weight
/// blob file is the concatenation of the blobs in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub input: InputSpec,
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_file: Option<String>,
    #[serde(default)]
    pub weight_sizes: indexmap::IndexMap<String, u64>,
}

// ---------------------------------------------------------------------------
// Validated graph

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelGraph {
    /// Layers in topological order.
    pub layers: Vec<Layer>,
    pub input: Layout,
    pub weight_sizes: indexmap::IndexMap<String, u64>,
    pub weights_file: Option<String>,
}

/// Reads and validates a model file. Shapes are inferred for every layer.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ModelGraph::from_json(&text)
}

impl ModelGraph {
    pub fn from_json(text: &str) -> Result<ModelGraph, ModelError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        ModelGraph::from_file(&file)
    }

    pub fn from_file(file: &ModelFile) -> Result<ModelGraph, ModelError> {
        if file.layers.is_empty() {
            return Err(ModelError::EmptyGraph);
        }
        let input = TensorShape::int8(file.input.dims.clone())
            .layout()
            .map_err(ModelError::BadInput)?;

        let mut seen = HashSet::new();
        let mut parsed = Vec::with_capacity(file.layers.len());
        for spec in &file.layers {
            if spec.id == GRAPH_INPUT || spec.id.is_empty() || !seen.insert(spec.id.as_str()) {
                return Err(ModelError::DuplicateId(spec.id.clone()));
            }
            let op = Op::parse(&spec.id, &spec.op, &spec.attrs)?;
            parsed.push((spec, op));
        }

        for (spec, op) in &parsed {
            let arity_ok = match op {
                Op::ElementwiseAdd(_) => spec.inputs.len() >= 2,
                _ => spec.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(ModelError::BadAttr {
                    layer: spec.id.clone(),
                    detail: format!("{} cannot take {} inputs", op.name(), spec.inputs.len()),
                });
            }
            for r in &spec.inputs {
                if r != GRAPH_INPUT && !seen.contains(r.as_str()) {
                    return Err(ModelError::DanglingRef {
                        layer: spec.id.clone(),
                        reference: r.clone(),
                    });
                }
            }
            match (op.has_weights(), &spec.weights) {
                (true, None) => {
                    return Err(ModelError::Weights {
                        layer: spec.id.clone(),
                        detail: "missing weights reference".into(),
                    })
                }
                (false, Some(_)) => {
                    return Err(ModelError::Weights {
                        layer: spec.id.clone(),
                        detail: format!("{} takes no weights", op.name()),
                    })
                }
                (true, Some(w)) if !file.weight_sizes.contains_key(w) => {
                    return Err(ModelError::Weights {
                        layer: spec.id.clone(),
                        detail: format!("weight blob {w:?} has no declared size"),
                    })
                }
                _ => {}
            }
        }

        let order = topo_order(&parsed)?;

        let mut layouts: HashMap<&str, Layout> = HashMap::new();
        let mut layers = Vec::with_capacity(order.len());
        for idx in order {
            let (spec, op) = &parsed[idx];
            let in_layouts: Vec<Layout> = spec
                .inputs
                .iter()
                .map(|r| {
                    if r == GRAPH_INPUT {
                        input
                    } else {
                        layouts[r.as_str()]
                    }
                })
                .collect();
            let output = infer_shape(&spec.id, op, &in_layouts)?;
            if let Some(w) = &spec.weights {
                let expected = weight_bytes(op);
                let declared = file.weight_sizes[w];
                if declared != expected {
                    return Err(ModelError::Weights {
                        layer: spec.id.clone(),
                        detail: format!(
                            "blob {w:?} declares {declared} bytes, layer needs {expected}"
                        ),
                    });
                }
            }
            layouts.insert(spec.id.as_str(), output);
            layers.push(Layer {
                id: spec.id.clone(),
                op: op.clone(),
                inputs: spec.inputs.clone(),
                weights: spec.weights.clone(),
                output,
            });
        }

        let graph = ModelGraph {
            layers,
            input,
            weight_sizes: file.weight_sizes.clone(),
            weights_file: file.weights_file.clone(),
        };
        let outputs: Vec<String> = graph
            .layers
            .iter()
            .filter(|l| graph.consumers(&l.id).is_empty())
            .map(|l| l.id.clone())
            .collect();
        if outputs.len() != 1 {
            return Err(ModelError::Outputs(outputs));
        }
        if !graph
            .layers
            .iter()
            .any(|l| l.inputs.iter().any(|r| r == GRAPH_INPUT))
        {
            return Err(ModelError::BadInput("graph input is not consumed".into()));
        }
        Ok(graph)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            input: InputSpec {
                dims: self.input.shape().dims,
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    id: l.id.clone(),
                    op: l.op.name().to_string(),
                    attrs: l.op.attrs_json(),
                    inputs: l.inputs.clone(),
                    weights: l.weights.clone(),
                })
                .collect(),
            weights_file: self.weights_file.clone(),
            weight_sizes: self.weight_sizes.clone(),
        }
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Layers that read `id` (each consumer listed once).
    pub fn consumers(&self, id: &str) -> Vec<&Layer> {
        self.layers
            .iter()
            .filter(|l| l.inputs.iter().any(|r| r == id))
            .collect()
    }

    pub fn output_layer(&self) -> &Layer {
        self.layers
            .iter()
            .find(|l| self.consumers(&l.id).is_empty())
            .expect("validated graph has an output")
    }

    pub fn layout_of(&self, reference: &str) -> Option<Layout> {
        if reference == GRAPH_INPUT {
            Some(self.input)
        } else {
            self.layer(reference).map(|l| l.output)
        }
    }
}

/// Bytes of the int8 weight blob a layer needs (OHWI for convolutions,
/// row = output neuron for dense layers).
pub fn weight_bytes(op: &Op) -> u64 {
    match op {
        Op::Conv2D(c) => c.out_channels * c.kernel_h * c.kernel_w * c.in_channels,
        Op::Dense(d) => d.out_features * d.in_features,
        _ => 0,
    }
}

fn topo_order(parsed: &[(&LayerSpec, Op)]) -> Result<Vec<usize>, ModelError> {
    let index: HashMap<&str, usize> = parsed
        .iter()
        .enumerate()
        .map(|(i, (s, _))| (s.id.as_str(), i))
        .collect();
    let mut indeg = vec![0usize; parsed.len()];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); parsed.len()];
    for (i, (spec, _)) in parsed.iter().enumerate() {
        let mut preds: Vec<usize> = spec
            .inputs
            .iter()
            .filter(|r| r.as_str() != GRAPH_INPUT)
            .map(|r| index[r.as_str()])
            .collect();
        preds.sort_unstable();
        preds.dedup();
        indeg[i] = preds.len();
        for p in preds {
            succ[p].push(i);
        }
    }
    // Kahn's algorithm, always taking the earliest ready layer in file order.
    let mut ready: std::collections::BTreeSet<usize> =
        (0..parsed.len()).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(parsed.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &s in &succ[i] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.insert(s);
            }
        }
    }
    if order.len() != parsed.len() {
        let stuck = (0..parsed.len()).find(|&i| indeg[i] > 0).unwrap();
        return Err(ModelError::Cycle {
            layer: parsed[stuck].0.id.clone(),
        });
    }
    Ok(order)
}

fn window_out(
    layer: &str,
    extent: u64,
    kernel: u64,
    stride: u64,
    pad: u64,
) -> Result<u64, ModelError> {
    if kernel == 0 || stride == 0 {
        return Err(ModelError::BadAttr {
            layer: layer.to_string(),
            detail: "kernel and stride must be positive".into(),
        });
    }
    let padded = extent + 2 * pad;
    if padded < kernel {
        return Err(ModelError::ShapeMismatch {
            layer: layer.to_string(),
            detail: format!("window {kernel} larger than padded extent {padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

fn infer_shape(layer: &str, op: &Op, inputs: &[Layout]) -> Result<Layout, ModelError> {
    let mismatch = |detail: String| ModelError::ShapeMismatch {
        layer: layer.to_string(),
        detail,
    };
    let positive = |vals: &[u64]| -> Result<(), ModelError> {
        if vals.contains(&0) {
            Err(ModelError::BadAttr {
                layer: layer.to_string(),
                detail: "sizes must be positive".into(),
            })
        } else {
            Ok(())
        }
    };
    let first = inputs[0];
    match op {
        Op::Conv2D(c) => {
            positive(&[
                c.in_channels,
                c.out_channels,
                c.kernel_h,
                c.kernel_w,
                c.stride,
            ])?;
            let Layout::Spatial { h, w, c: ch } = first else {
                return Err(mismatch(format!(
                    "Conv2D needs a spatial input, got {first}"
                )));
            };
            if ch != c.in_channels {
                return Err(mismatch(format!(
                    "in_channels={} but input has {ch} channels",
                    c.in_channels
                )));
            }
            Ok(Layout::Spatial {
                h: window_out(layer, h, c.kernel_h, c.stride, c.padding)?,
                w: window_out(layer, w, c.kernel_w, c.stride, c.padding)?,
                c: c.out_channels,
            })
        }
        Op::Dense(d) => {
            positive(&[d.in_features, d.out_features])?;
            if first.numel() != d.in_features {
                return Err(mismatch(format!(
                    "in_features={} but input {first} has {} elements",
                    d.in_features,
                    first.numel()
                )));
            }
            Ok(Layout::Flat { f: d.out_features })
        }
        Op::MaxPool2D(p) => {
            let Layout::Spatial { h, w, c } = first else {
                return Err(mismatch(format!(
                    "MaxPool2D needs a spatial input, got {first}"
                )));
            };
            Ok(Layout::Spatial {
                h: window_out(layer, h, p.window, p.stride, 0)?,
                w: window_out(layer, w, p.window, p.stride, 0)?,
                c,
            })
        }
        Op::ElementwiseAdd(_) => {
            if let Some(other) = inputs.iter().find(|l| **l != first) {
                return Err(mismatch(format!("operands {first} and {other} differ")));
            }
            Ok(first)
        }
        Op::Relu => Ok(first),
        Op::Flatten => Ok(Layout::Flat { f: first.numel() }),
    }
}

/// Absorbs every ReLU whose only input is a Conv2D or Dense layer that has no
/// other consumer. The producer keeps its id and gains a ReLU epilogue;
/// readers of the ReLU are rewired to the producer.
pub fn fuse_operators(g: &ModelGraph) -> ModelGraph {
    let mut out = g.clone();
    loop {
        let candidate = out.layers.iter().find_map(|l| {
            if l.op != Op::Relu || l.inputs.len() != 1 {
                return None;
            }
            let src = &l.inputs[0];
            let producer = out.layer(src)?;
            let fusable = matches!(producer.op, Op::Conv2D(_) | Op::Dense(_))
                && out.consumers(src).len() == 1
                && producer.inputs.iter().all(|r| r != &l.id);
            fusable.then(|| (l.id.clone(), src.clone()))
        });
        let Some((relu_id, producer_id)) = candidate else {
            break;
        };
        let pi = out.index_of(&producer_id).unwrap();
        match &mut out.layers[pi].op {
            Op::Conv2D(c) => c.relu = true,
            Op::Dense(d) => d.relu = true,
            _ => unreachable!(),
        }
        out.layers.retain(|l| l.id != relu_id);
        for l in &mut out.layers {
            for r in &mut l.inputs {
                if *r == relu_id {
                    *r = producer_id.clone();
                }
            }
        }
    }
    out
}
