//! The fully-convolutional student network.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use graspxfer_tensor::kernels::{conv2d_forward, maxpool2d_forward};
use graspxfer_tensor::{read_container, write_container, Container, Graph, NodeId, Tensor, TensorError};

use crate::error::NetError;
use crate::render::{depth_to_height, PairedSample};
use crate::volume::{ScoreSource, ScoreVolume, THETA_BINS};

/// Output cells per input pixel along each axis is `1 / OUTPUT_STRIDE`.
pub const OUTPUT_STRIDE: usize = 4;
/// Heights are divided by this before entering the RGB-D student.
pub const DEPTH_CHANNEL_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Rgbd,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Rgbd => 4,
        }
    }

    pub fn source(self) -> ScoreSource {
        match self {
            Modality::Rgb => ScoreSource::Rgb,
            Modality::Rgbd => ScoreSource::Rgbd,
        }
    }
}

/// Student input: RGB centered on zero, plus a scaled height channel for
/// RGB-D. The RGB student never sees depth.
pub fn prepare_input(sample: &PairedSample, modality: Modality, camera_height: f64) -> Tensor {
    let rgb = sample.rgb.map(|v| v - 0.5).expect("finite");
    match modality {
        Modality::Rgb => rgb,
        Modality::Rgbd => {
            let h = depth_to_height(&sample.depth, camera_height)
                .map(|v| v / DEPTH_CHANNEL_SCALE)
                .expect("finite");
            Tensor::concat0(&[&rgb, &h]).expect("co-registered channels")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        window: usize,
    },
    Relu,
    Sigmoid,
}

fn desk_layers() -> Vec<Layer> {
    let conv = |out_channels, kernel, pad| Layer::Conv {
        out_channels,
        kernel,
        stride: 1,
        pad,
    };
    vec![
        conv(16, 5, 2),
        Layer::Relu,
        Layer::MaxPool { window: 2 },
        conv(32, 3, 1),
        Layer::Relu,
        conv(32, 3, 1),
        Layer::Relu,
        Layer::MaxPool { window: 2 },
        conv(64, 3, 1),
        Layer::Relu,
        conv(THETA_BINS, 1, 0),
        Layer::Sigmoid,
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    input_channels: usize,
    layers: Vec<Layer>,
    /// Kernel then bias for each conv layer, in layer order.
    weights: Vec<Tensor>,
}

/// Checkpoint metadata beyond the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub optimizer_step: u64,
    pub modality: Option<Modality>,
}

impl NetworkParams {
    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    fn check(&self) -> Result<(), NetError> {
        let mut c = self.input_channels;
        let mut w = 0;
        for layer in &self.layers {
            if let Layer::Conv { out_channels, kernel, .. } = *layer {
                let (k, b) = (self.weights.get(w), self.weights.get(w + 1));
                let ok = k.map(|k| k.shape() == [out_channels, c, kernel, kernel]).unwrap_or(false)
                    && b.map(|b| b.shape() == [out_channels]).unwrap_or(false);
                if !ok {
                    return Err(NetError::Invalid(format!("weights of conv layer {} do not match its spec", w / 2)));
                }
                c = out_channels;
                w += 2;
            }
        }
        if w != self.weights.len() {
            return Err(NetError::Invalid("more weight tensors than conv layers".into()));
        }
        match self.layers.last() {
            Some(Layer::Sigmoid) if c == THETA_BINS => Ok(()),
            _ => Err(NetError::Invalid(format!("head must be a sigmoid over {THETA_BINS} channels"))),
        }
    }

    fn check_input(&self, image: &Tensor) -> Result<(), NetError> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.input_channels {
            return Err(TensorError::Dimension(format!(
                "network expects [{}, H, W] input, got {s:?}",
                self.input_channels
            ))
            .into());
        }
        if s[1] % OUTPUT_STRIDE != 0 || s[2] % OUTPUT_STRIDE != 0 || s[1] == 0 || s[2] == 0 {
            return Err(TensorError::Dimension(format!("input dims {s:?} must be positive multiples of {OUTPUT_STRIDE}")).into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, info: &CheckpointInfo) -> Result<(), NetError> {
        let mut c = Container::new(serde_json::json!({
            "kind": "student_network",
            "input_channels": self.input_channels,
            "layers": self.layers,
            "optimizer_step": info.optimizer_step,
            "modality": info.modality,
        }));
        for (i, t) in self.weights.iter().enumerate() {
            let name = format!("conv{}.{}", i / 2, if i % 2 == 0 { "weight" } else { "bias" });
            c.push(name, t.clone());
        }
        write_container(path, &c)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointInfo), NetError> {
        let c = read_container(path)?;
        let meta = &c.meta;
        let bad = |m: &str| NetError::Invalid(format!("{}: {m}", path.display()));
        if meta.get("kind").and_then(|k| k.as_str()) != Some("student_network") {
            return Err(bad("not a student network checkpoint"));
        }
        let input_channels = meta
            .get("input_channels")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("missing input_channels"))? as usize;
        let layers: Vec<Layer> = serde_json::from_value(meta.get("layers").cloned().unwrap_or_default())
            .map_err(|e| bad(&format!("bad layer list: {e}")))?;
        let info = CheckpointInfo {
            optimizer_step: meta.get("optimizer_step").and_then(|v| v.as_u64()).unwrap_or(0),
            modality: meta
                .get("modality")
                .cloned()
                .and_then(|v| serde_json::from_value(v).ok())
                .flatten(),
        };
        let params = NetworkParams {
            input_channels,
            layers,
            weights: c.tensors.into_iter().map(|(_, t)| t).collect(),
        };
        params.check()?;
        Ok((params, info))
    }
}

pub fn build_network(input_channels: usize, seed: u64) -> Result<NetworkParams, NetError> {
    if ![1, 3, 4].contains(&input_channels) {
        return Err(NetError::Invalid(format!("input channels must be 1, 3 or 4, got {input_channels}")));
    }
    let layers = desk_layers();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut c = input_channels;
    for layer in &layers {
        if let Layer::Conv { out_channels, kernel, .. } = *layer {
            let fan_in = (c * kernel * kernel) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let k = Tensor::from_fn(&[out_channels, c, kernel, kernel], |_| rng.gen_range(-bound..bound))?;
            weights.push(k);
            weights.push(Tensor::zeros(&[out_channels]));
            c = out_channels;
        }
    }
    let p = NetworkParams {
        input_channels,
        layers,
        weights,
    };
    p.check()?;
    Ok(p)
}

/// Inference without building a graph.
pub fn forward_dense(params: &NetworkParams, image: &Tensor) -> Result<ScoreVolume, NetError> {
    params.check_input(image)?;
    let mut x = image.clone();
    let mut w = 0;
    for layer in &params.layers {
        x = match *layer {
            Layer::Conv { stride, pad, .. } => {
                let y = conv2d_forward(&x, &params.weights[w], Some(&params.weights[w + 1]), stride, pad)?;
                w += 2;
                y
            }
            Layer::MaxPool { window } => maxpool2d_forward(&x, window)?.0,
            Layer::Relu => x.map(|v| v.max(0.0))?,
            Layer::Sigmoid => x.map(graspxfer_tensor::graph::sigmoid)?,
        };
    }
    let source = match params.input_channels {
        1 => ScoreSource::Depth,
        3 => ScoreSource::Rgb,
        _ => ScoreSource::Rgbd,
    };
    Ok(ScoreVolume::new(x, OUTPUT_STRIDE, source)?)
}

/// Records the forward pass on `graph`; returns the output node and the
/// parameter nodes in weight order.
pub fn forward_graph(params: &NetworkParams, graph: &mut Graph, image: &Tensor) -> Result<(NodeId, Vec<NodeId>), NetError> {
    params.check_input(image)?;
    let pnodes: Vec<NodeId> = params.weights.iter().map(|t| graph.param(t.clone())).collect();
    let mut x = graph.constant(image.clone());
    let mut w = 0;
    for layer in &params.layers {
        x = match *layer {
            Layer::Conv { stride, pad, .. } => {
                let y = graph.conv2d(x, pnodes[w], Some(pnodes[w + 1]), stride, pad)?;
                w += 2;
                y
            }
            Layer::MaxPool { window } => graph.maxpool2d(x, window)?,
            Layer::Relu => graph.relu(x),
            Layer::Sigmoid => graph.sigmoid(x),
        };
    }
    Ok((x, pnodes))
}
