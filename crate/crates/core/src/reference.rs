//! Functional int8 executor. Used as a correctness oracle, not for timing.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::model::{Layout, ModelGraph, Op, GRAPH_INPUT};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("missing weight blob {0:?}")]
    MissingWeights(String),
    #[error("weight blob {name:?} has {actual} bytes, expected {expected}")]
    WeightSize {
        name: String,
        expected: u64,
        actual: u64,
    },
    #[error("input has {actual} elements, graph expects {expected} ({layout})")]
    InputShape {
        expected: u64,
        actual: u64,
        layout: Layout,
    },
    #[error("weight file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub layout: Layout,
    /// Row-major NHWC (or flat) int8 values.
    pub data: Vec<i8>,
}

impl Tensor {
    pub fn new(layout: Layout, data: Vec<i8>) -> Self {
        assert_eq!(layout.numel() as usize, data.len(), "tensor size mismatch");
        Tensor { layout, data }
    }
}

/// Named int8 weight blobs.
#[derive(Debug, Clone, Default)]
pub struct WeightStore {
    blobs: HashMap<String, Vec<i8>>,
}

impl WeightStore {
    pub fn insert(&mut self, name: impl Into<String>, data: Vec<i8>) {
        self.blobs.insert(name.into(), data);
    }

    pub fn get(&self, name: &str) -> Option<&[i8]> {
        self.blobs.get(name).map(|v| v.as_slice())
    }

    /// Splits a concatenated blob file using the graph's declared sizes, in
    /// declaration order.
    pub fn from_bytes(g: &ModelGraph, bytes: &[u8]) -> Result<Self, ExecError> {
        let mut store = WeightStore::default();
        let mut offset = 0usize;
        for (name, &size) in &g.weight_sizes {
            let end = offset + size as usize;
            let Some(chunk) = bytes.get(offset..end) else {
                return Err(ExecError::WeightSize {
                    name: name.clone(),
                    expected: size,
                    actual: bytes.len().saturating_sub(offset) as u64,
                });
            };
            store.insert(name.clone(), chunk.iter().map(|&b| b as i8).collect());
            offset = end;
        }
        Ok(store)
    }

    pub fn load(g: &ModelGraph, path: impl AsRef<Path>) -> Result<Self, ExecError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ExecError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(g, &bytes)
    }
}

fn requantize(acc: i32, shift: u32) -> i8 {
    (acc >> shift.min(31)).clamp(i8::MIN as i32, i8::MAX as i32) as i8
}

/// Runs the graph layer by layer with int32 accumulation and saturating
/// requantization (arithmetic right shift, clamp to int8).
pub fn execute_reference(
    g: &ModelGraph,
    input: &Tensor,
    weights: &WeightStore,
) -> Result<Tensor, ExecError> {
    if input.layout.numel() != g.input.numel() || input.data.len() as u64 != g.input.numel() {
        return Err(ExecError::InputShape {
            expected: g.input.numel(),
            actual: input.data.len() as u64,
            layout: g.input,
        });
    }
    let mut values: HashMap<&str, Vec<i8>> = HashMap::new();
    values.insert(GRAPH_INPUT, input.data.clone());

    for layer in &g.layers {
        let arg = |i: usize| values[layer.inputs[i].as_str()].as_slice();
        let in_layout = g.layout_of(&layer.inputs[0]).unwrap();
        let blob = match &layer.weights {
            Some(name) => {
                let w = weights
                    .get(name)
                    .ok_or_else(|| ExecError::MissingWeights(name.clone()))?;
                let expected = g.weight_sizes[name];
                if w.len() as u64 != expected {
                    return Err(ExecError::WeightSize {
                        name: name.clone(),
                        expected,
                        actual: w.len() as u64,
                    });
                }
                w
            }
            None => &[],
        };
        let out = match &layer.op {
            Op::Conv2D(c) => {
                let Layout::Spatial { h, w, .. } = in_layout else {
                    unreachable!("validated")
                };
                let Layout::Spatial { h: oh, w: ow, .. } = layer.output else {
                    unreachable!("validated")
                };
                let x = arg(0);
                let (cin, cout) = (c.in_channels as usize, c.out_channels as usize);
                let (kh, kw) = (c.kernel_h as i64, c.kernel_w as i64);
                let mut out = Vec::with_capacity((oh * ow) as usize * cout);
                for oy in 0..oh as i64 {
                    for ox in 0..ow as i64 {
                        for oc in 0..cout {
                            let mut acc: i32 = 0;
                            for ky in 0..kh {
                                let iy = oy * c.stride as i64 - c.padding as i64 + ky;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ox * c.stride as i64 - c.padding as i64 + kx;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    let xb = ((iy * w as i64 + ix) as usize) * cin;
                                    let wb = ((oc as i64 * kh + ky) * kw + kx) as usize * cin;
                                    for ic in 0..cin {
                                        acc = acc
                                            .wrapping_add(x[xb + ic] as i32 * blob[wb + ic] as i32);
                                    }
                                }
                            }
                            let v = requantize(acc, c.shift);
                            out.push(if c.relu { v.max(0) } else { v });
                        }
                    }
                }
                out
            }
            Op::Dense(d) => {
                let x = arg(0);
                let k = d.in_features as usize;
                (0..d.out_features as usize)
                    .map(|o| {
                        let row = &blob[o * k..(o + 1) * k];
                        let acc = row
                            .iter()
                            .zip(x)
                            .fold(0i32, |a, (&w, &v)| a.wrapping_add(w as i32 * v as i32));
                        let v = requantize(acc, d.shift);
                        if d.relu {
                            v.max(0)
                        } else {
                            v
                        }
                    })
                    .collect()
            }
            Op::Relu => arg(0).iter().map(|&v| v.max(0)).collect(),
            Op::ElementwiseAdd(a) => {
                let n = arg(0).len();
                (0..n)
                    .map(|i| {
                        let acc = (0..layer.inputs.len()).fold(0i32, |s, j| s + arg(j)[i] as i32);
                        requantize(acc, a.shift)
                    })
                    .collect()
            }
            Op::MaxPool2D(p) => {
                let Layout::Spatial { w, c, .. } = in_layout else {
                    unreachable!("validated")
                };
                let Layout::Spatial { h: oh, w: ow, .. } = layer.output else {
                    unreachable!("validated")
                };
                let x = arg(0);
                let mut out = Vec::with_capacity((oh * ow * c) as usize);
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut m = i8::MIN;
                            for ky in 0..p.window {
                                for kx in 0..p.window {
                                    let iy = oy * p.stride + ky;
                                    let ix = ox * p.stride + kx;
                                    m = m.max(x[((iy * w + ix) * c + ch) as usize]);
                                }
                            }
                            out.push(m);
                        }
                    }
                }
                out
            }
            Op::Flatten => arg(0).to_vec(),
        };
        values.insert(layer.id.as_str(), out);
    }

    let out = g.output_layer();
    Ok(Tensor::new(
        out.output,
        values.remove(out.id.as_str()).unwrap(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn dense_graph(inf: u64, outf: u64) -> ModelGraph {
        ModelGraph::from_json(
            &json!({
                "input": {"dims": [inf]},
                "layers": [{"id": "fc", "op": "Dense", "inputs": ["input"], "weights": "w",
                    "attrs": {"in_features": inf, "out_features": outf}}],
                "weight_sizes": {"w": inf * outf}
            })
            .to_string(),
        )
        .unwrap()
    }

    #[test]
    fn identity_conv() {
        let g = ModelGraph::from_json(
            &json!({
                "input": {"dims": [3, 3, 1]},
                "layers": [{"id": "c", "op": "Conv2D", "inputs": ["input"], "weights": "w",
                    "attrs": {"in_channels": 1, "out_channels": 1, "kernel_h": 1, "kernel_w": 1}}],
                "weight_sizes": {"w": 1}
            })
            .to_string(),
        )
        .unwrap();
        let mut ws = WeightStore::default();
        ws.insert("w", vec![1]);
        let x = Tensor::new(g.input, vec![5; 9]);
        assert_eq!(execute_reference(&g, &x, &ws).unwrap().data, vec![5; 9]);
    }

    #[test]
    fn dense_hand_arithmetic() {
        let g = dense_graph(2, 2);
        let mut ws = WeightStore::default();
        ws.insert("w", vec![1, 2, 3, 4]);
        let x = Tensor::new(g.input, vec![1, 1]);
        assert_eq!(execute_reference(&g, &x, &ws).unwrap().data, vec![3, 7]);
    }

    #[test]
    fn dense_saturates() {
        let g = dense_graph(1, 1);
        let mut ws = WeightStore::default();
        ws.insert("w", vec![127]);
        let x = Tensor::new(g.input, vec![127]);
        assert_eq!(execute_reference(&g, &x, &ws).unwrap().data, vec![127]);
        ws.insert("w", vec![-128]);
        assert_eq!(execute_reference(&g, &x, &ws).unwrap().data, vec![-128]);
    }

    #[test]
    fn shift_is_arithmetic() {
        assert_eq!(requantize(-3, 1), -2);
        assert_eq!(requantize(1000, 3), 125);
        assert_eq!(requantize(1 << 20, 0), 127);
    }

    #[test]
    fn missing_blob_reported() {
        let g = dense_graph(2, 2);
        let x = Tensor::new(g.input, vec![1, 1]);
        let err = execute_reference(&g, &x, &WeightStore::default()).unwrap_err();
        assert!(matches!(err, ExecError::MissingWeights(_)));
    }

    #[test]
    fn blob_file_split_in_declaration_order() {
        let g = ModelGraph::from_json(
            r#"{
                "input": {"dims": [2]},
                "layers": [
                    {"id": "b", "op": "Dense", "inputs": ["a"], "weights": "wb",
                     "attrs": {"in_features": 1, "out_features": 1}},
                    {"id": "a", "op": "Dense", "inputs": ["input"], "weights": "wa",
                     "attrs": {"in_features": 2, "out_features": 1}}
                ],
                "weight_sizes": {"wb": 1, "wa": 2}
            }"#,
        )
        .unwrap();
        let ws = WeightStore::from_bytes(&g, &[9, 1, 2]).unwrap();
        assert_eq!(ws.get("wb"), Some(&[9i8][..]));
        assert_eq!(ws.get("wa"), Some(&[1i8, 2][..]));
        assert!(WeightStore::from_bytes(&g, &[9, 1]).is_err());
    }
}
