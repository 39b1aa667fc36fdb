use std::path::Path;

use super::conv::KERNEL;
use super::model::{CnnModel, ConvLayer, Gradients};
use super::train::AdamState;
use crate::container::{Tensor, TensorContainer};
use crate::dataset::ChannelStats;
use crate::error::{Error, Result};

fn corrupt(reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: None,
        reason: reason.into(),
    }
}

fn push_layers(c: &mut TensorContainer, prefix: &str, layers: &[ConvLayer]) -> Result<()> {
    for (idx, l) in layers.iter().enumerate() {
        c.push(Tensor::f64(
            format!("{prefix}layer{}.weight", idx + 1),
            vec![l.out_ch, l.in_ch, KERNEL, KERNEL],
            l.weights.clone(),
        ))?;
        c.push(Tensor::f64(format!("{prefix}layer{}.bias", idx + 1), vec![l.out_ch], l.bias.clone()))?;
    }
    Ok(())
}

fn read_layers(c: &TensorContainer, prefix: &str, n_layers: usize) -> Result<Vec<ConvLayer>> {
    (1..=n_layers)
        .map(|idx| {
            let (shape, w) = c.f64_tensor(&format!("{prefix}layer{idx}.weight"))?;
            if shape.len() != 4 || shape[2] != KERNEL || shape[3] != KERNEL {
                return Err(corrupt(format!("layer {idx}: bad kernel shape {shape:?}")));
            }
            let (bshape, b) = c.f64_tensor(&format!("{prefix}layer{idx}.bias"))?;
            if bshape != [shape[0]] {
                return Err(corrupt(format!("layer {idx}: bias shape {bshape:?}")));
            }
            Ok(ConvLayer {
                in_ch: shape[1],
                out_ch: shape[0],
                weights: w.to_vec(),
                bias: b.to_vec(),
            })
        })
        .collect()
}

/// Serializes a model, and optionally its optimizer state, into a container.
pub fn checkpoint_container(
    model: &CnnModel,
    optimizer: Option<&AdamState>,
    config_hash: [u8; 32],
) -> Result<TensorContainer> {
    model.validate()?;
    let mut c = TensorContainer::new(config_hash);
    c.set_meta("kind", "cnn");
    c.set_meta("grid", model.n.to_string());
    c.set_meta("layers", model.layers.len().to_string());
    c.set_meta("kernel", KERNEL.to_string());
    push_layers(&mut c, "", &model.layers)?;
    let s = &model.norm;
    for (name, v) in [
        ("norm.input_mean", &s.input_mean),
        ("norm.input_std", &s.input_std),
        ("norm.target_mean", &s.target_mean),
        ("norm.target_std", &s.target_std),
    ] {
        c.push(Tensor::f64(name, vec![v.len()], v.clone()))?;
    }
    if let Some(a) = optimizer {
        c.set_meta("adam_steps", a.t.to_string());
        push_layers(&mut c, "adam.m.", &a.m.layers)?;
        push_layers(&mut c, "adam.v.", &a.v.layers)?;
    }
    Ok(c)
}

pub fn model_from_container(c: &TensorContainer) -> Result<(CnnModel, Option<AdamState>)> {
    if c.meta("kind") != Some("cnn") {
        return Err(corrupt("not a network checkpoint"));
    }
    let parse = |key: &str| -> Result<usize> {
        c.meta(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt(format!("missing or bad '{key}'")))
    };
    let n = parse("grid")?;
    let n_layers = parse("layers")?;
    if parse("kernel")? != KERNEL {
        return Err(corrupt("unsupported kernel size"));
    }
    let layers = read_layers(c, "", n_layers)?;
    let vec = |name: &str| -> Result<Vec<f64>> { Ok(c.f64_tensor(name)?.1.to_vec()) };
    let model = CnnModel {
        n,
        layers,
        norm: ChannelStats {
            input_mean: vec("norm.input_mean")?,
            input_std: vec("norm.input_std")?,
            target_mean: vec("norm.target_mean")?,
            target_std: vec("norm.target_std")?,
        },
    };
    model.validate().map_err(|e| corrupt(e.to_string()))?;
    let optimizer = match c.meta("adam_steps") {
        None => None,
        Some(t) => Some(AdamState {
            m: Gradients {
                layers: read_layers(c, "adam.m.", n_layers)?,
            },
            v: Gradients {
                layers: read_layers(c, "adam.v.", n_layers)?,
            },
            t: t.parse().map_err(|_| corrupt("bad adam step count"))?,
        }),
    };
    Ok((model, optimizer))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &CnnModel,
    optimizer: Option<&AdamState>,
    config_hash: [u8; 32],
) -> Result<()> {
    checkpoint_container(model, optimizer, config_hash)?.write(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CnnModel, Option<AdamState>)> {
    let path = path.as_ref();
    model_from_container(&TensorContainer::read(path)?).map_err(|e| match e {
        Error::Corrupt { reason, .. } => Error::Corrupt {
            path: Some(path.to_path_buf()),
            reason,
        },
        other => other,
    })
}
