//! Forward pass of the encoder, attention ConvLSTM and decoder on a [`Graph`].

use std::sync::Arc;

use super::config::ModelConfig;
use super::params::{ModelParams, GATES};
use crate::autodiff::{Array, Graph, Var};
use crate::error::{Error, Result};

/// Hidden and cell maps of one ConvLSTM layer. `None` is the all-zero start state.
#[derive(Clone, Copy, Debug, Default)]
pub struct CellState {
    pub hidden: Option<Var>,
    pub cell: Option<Var>,
}

/// Gate activations of one ConvLSTM step, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub z: Var,
    pub r: Var,
    pub o: Var,
    pub cell: Var,
    pub hidden: Var,
}

fn param(g: &mut Graph, params: &ModelParams, name: &str) -> Result<Var> {
    let id = params.id(name)?;
    Ok(g.param(id, &params.values()[id]))
}

fn check_input(cfg: &ModelConfig, x: &Array) -> Result<()> {
    let want = [cfg.n, cfg.n, cfg.input_channels()];
    if x.shape() != want {
        return Err(Error::Config(format!(
            "signature tensor shape {:?} does not match model input {want:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Conv1..Conv4 with SELU.
pub fn encode(g: &mut Graph, params: &ModelParams, x: Var) -> Result<[Var; 4]> {
    check_input(params.config(), g.value(x))?;
    let specs = params.config().encoder_specs();
    let mut maps = Vec::with_capacity(4);
    let mut cur = x;
    for (l, spec) in specs.iter().enumerate() {
        let w = param(g, params, &format!("enc{}.w", l + 1))?;
        let b = param(g, params, &format!("enc{}.b", l + 1))?;
        let y = g.conv2d(cur, w, spec.stride)?;
        let y = g.add_bias(y, b)?;
        cur = g.selu(y);
        maps.push(cur);
    }
    Ok(maps.try_into().expect("four layers"))
}

/// One peephole ConvLSTM step for encoder layer `layer` (0-based).
pub fn convlstm_step(
    g: &mut Graph,
    params: &ModelParams,
    layer: usize,
    x: Var,
    state: CellState,
) -> Result<CellVars> {
    let p = |g: &mut Graph, name: String| param(g, params, &name);
    let l = layer + 1;
    let d = *g.value(x).shape().last().unwrap_or(&0);

    // the four gate kernels run as one convolution and are sliced apart
    let wx: Vec<Var> = GATES
        .iter()
        .map(|k| p(g, format!("lstm{l}.w_x{k}")))
        .collect::<Result<_>>()?;
    let wx = g.concat_last(&wx)?;
    let mut pre = g.conv2d(x, wx, 1)?;
    if let Some(h) = state.hidden {
        let wh: Vec<Var> = GATES
            .iter()
            .map(|k| p(g, format!("lstm{l}.w_h{k}")))
            .collect::<Result<_>>()?;
        let wh = g.concat_last(&wh)?;
        let hc = g.conv2d(h, wh, 1)?;
        pre = g.add(pre, hc)?;
    }
    let gate = |g: &mut Graph, idx: usize| -> Result<Var> {
        let s = g.slice_last(pre, idx * d, (idx + 1) * d)?;
        let b = p(g, format!("lstm{l}.b_{}", GATES[idx]))?;
        g.add_bias(s, b)
    };
    let (az, ar, ac, ao) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);

    let peep = |g: &mut Graph, a: Var, name: &str, c: Option<Var>| -> Result<Var> {
        match c {
            Some(c) => {
                let w = p(g, format!("lstm{l}.w_c{name}"))?;
                let t = g.mul(w, c)?;
                g.add(a, t)
            }
            None => Ok(a),
        }
    };
    let az = peep(g, az, "z", state.cell)?;
    let z = g.sigmoid(az);
    let ar = peep(g, ar, "r", state.cell)?;
    let r = g.sigmoid(ar);
    let cand = g.tanh(ac);
    let mut cell = g.mul(z, cand)?;
    if let Some(c) = state.cell {
        let keep = g.mul(r, c)?;
        cell = g.add(cell, keep)?;
    }
    let ao = peep(g, ao, "o", Some(cell))?;
    let o = g.sigmoid(ao);
    let tc = g.tanh(cell);
    let hidden = g.mul(o, tc)?;
    Ok(CellVars {
        z,
        r,
        o,
        cell,
        hidden,
    })
}

/// Softmax-weighted recombination of `history` (oldest first) by similarity to its last entry.
pub fn attention(g: &mut Graph, history: &[Var], chi: f64) -> Result<(Var, Var)> {
    let last = *history
        .last()
        .ok_or_else(|| Error::Shape("attention over an empty history".into()))?;
    let scores: Vec<Var> = history
        .iter()
        .map(|&h| g.dot(last, h).map(|s| g.scale(s, 1.0 / chi)))
        .collect::<Result<_>>()?;
    let scores = g.stack(&scores)?;
    let alpha = g.softmax(scores);
    let mut refined = None;
    for (i, &h) in history.iter().enumerate() {
        let a = g.pick(alpha, i)?;
        let term = g.scalar_mul(a, h)?;
        refined = Some(match refined {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok((refined.expect("non-empty history"), alpha))
}

/// DeConv4..DeConv1 with skip concatenation `[refined_l, decoded_l]`.
pub fn decode(g: &mut Graph, params: &ModelParams, refined: &[Var; 4]) -> Result<Var> {
    let cfg = params.config();
    let sizes = cfg.spatial_sizes();
    let specs = cfg.decoder_specs();
    for (l, &v) in refined.iter().enumerate() {
        let want = [sizes[l + 1], sizes[l + 1], cfg.channels[l]];
        if g.value(v).shape() != want {
            return Err(Error::Shape(format!(
                "refined map {} has shape {:?}, expected {want:?}",
                l + 1,
                g.value(v).shape()
            )));
        }
    }
    let mut cur = refined[3];
    for l in (0..4).rev() {
        let input = if l == 3 {
            cur
        } else {
            g.concat_last(&[refined[l], cur])?
        };
        let w = param(g, params, &format!("dec{}.w", l + 1))?;
        let b = param(g, params, &format!("dec{}.b", l + 1))?;
        let y = g.deconv2d(input, w, specs[l].stride, (sizes[l], sizes[l]))?;
        let y = g.add_bias(y, b)?;
        cur = g.selu(y);
    }
    Ok(cur)
}

/// Graph handles produced by [`build`].
#[derive(Clone, Debug)]
pub struct Built {
    pub reconstruction: Var,
    /// Attention weights per layer; `None` where attention is not applied.
    pub alphas: [Option<Var>; 4],
}

/// Encode every step, run the recurrent layers, refine and decode the last anchor.
pub fn build(g: &mut Graph, params: &ModelParams, seq: &[Arc<Array>]) -> Result<Built> {
    let cfg = params.config();
    if seq.len() != cfg.h {
        return Err(Error::Config(format!(
            "sequence has {} steps, model expects h={}",
            seq.len(),
            cfg.h
        )));
    }
    let mut encoded = Vec::with_capacity(seq.len());
    for x in seq {
        check_input(cfg, x)?;
        let xv = g.input(Arc::clone(x));
        encoded.push(encode(g, params, xv)?);
    }
    let last = encoded.len() - 1;
    let mut refined = encoded[last];
    let mut alphas = [None; 4];
    for l in 0..4 {
        if !cfg.mode.recurrent(l) {
            continue;
        }
        let mut state = CellState::default();
        let mut hidden = Vec::with_capacity(seq.len());
        for step in &encoded {
            let out = convlstm_step(g, params, l, step[l], state)?;
            state = CellState {
                hidden: Some(out.hidden),
                cell: Some(out.cell),
            };
            hidden.push(out.hidden);
        }
        if cfg.mode.attention() {
            let (r, a) = attention(g, &hidden, cfg.chi)?;
            refined[l] = r;
            alphas[l] = Some(a);
        } else {
            refined[l] = hidden[last];
        }
    }
    let reconstruction = decode(g, params, &refined)?;
    Ok(Built {
        reconstruction,
        alphas,
    })
}

/// Reconstruction of the last anchor and the attention weights per layer.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub reconstruction: Array,
    pub attention: [Option<Vec<f64>>; 4],
}

pub fn forward(params: &ModelParams, seq: &[Arc<Array>]) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let built = build(&mut g, params, seq)?;
    Ok(ForwardOutput {
        reconstruction: g.value(built.reconstruction).clone(),
        attention: built.alphas.map(|a| a.map(|v| g.value(v).data().to_vec())),
    })
}

/// Sum of squared differences between a tensor and its reconstruction.
pub fn reconstruction_loss(target: &Array, reconstruction: &Array) -> Result<f64> {
    target.check_same_shape(reconstruction, "loss")?;
    Ok(target
        .data()
        .iter()
        .zip(reconstruction.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Loss of one sequence: reconstruct its last tensor.
pub fn sequence_loss(params: &ModelParams, seq: &[Arc<Array>]) -> Result<f64> {
    let out = forward(params, seq)?;
    reconstruction_loss(seq.last().expect("checked length"), &out.reconstruction)
}

/// Loss of one sequence and the gradient for every parameter array.
pub fn loss_and_grads(
    params: &ModelParams,
    seq: &[Arc<Array>],
) -> Result<(f64, Vec<Option<Array>>)> {
    let mut g = Graph::new();
    let built = build(&mut g, params, seq)?;
    let target = Arc::clone(seq.last().expect("checked length"));
    let loss = g.sq_err(built.reconstruction, target)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let grads = g.backward(loss)?.into_param_grads(params.len());
    Ok((value, grads))
}
