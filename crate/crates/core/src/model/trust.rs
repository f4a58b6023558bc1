//! Transformer encoder over observation patches, adaptive pooling to a coarse
//! grid, and a convolutional decoder that doubles resolution per stage while
//! concatenating projected encoder features.

use super::params::{bind, Bound, Init, ParamSpec};
use super::{ModelConfig, ModelParams, TrustConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub(super) fn param_specs(c: &TrustConfig) -> Vec<ParamSpec> {
    let (d, p2, t) = (c.embed_dim, c.patch_size * c.patch_size, c.num_tokens());
    let hidden = c.mlp_ratio * d;
    let mut specs = vec![
        ParamSpec::lecun("embed.weight", [p2, d], p2),
        ParamSpec::zeros("embed.bias", d),
        ParamSpec::new("embed.pos", [t, d], Init::Normal(0.02)),
    ];
    for b in 1..=c.encoder_depth {
        for proj in ["q", "k", "v", "o"] {
            specs.push(ParamSpec::lecun(format!("block{b}.attn.{proj}.weight"), [d, d], d));
            specs.push(ParamSpec::zeros(format!("block{b}.attn.{proj}.bias"), d));
        }
        specs.push(ParamSpec::new(format!("block{b}.ln1.gamma"), [d], Init::Ones));
        specs.push(ParamSpec::zeros(format!("block{b}.ln1.beta"), d));
        specs.push(ParamSpec::he(format!("block{b}.mlp.fc1.weight"), [d, hidden], d));
        specs.push(ParamSpec::zeros(format!("block{b}.mlp.fc1.bias"), hidden));
        specs.push(ParamSpec::lecun(
            format!("block{b}.mlp.fc2.weight"),
            [hidden, d],
            hidden,
        ));
        specs.push(ParamSpec::zeros(format!("block{b}.mlp.fc2.bias"), d));
        specs.push(ParamSpec::new(format!("block{b}.ln2.gamma"), [d], Init::Ones));
        specs.push(ParamSpec::zeros(format!("block{b}.ln2.beta"), d));
    }
    let ch = &c.decoder_channels;
    specs.push(ParamSpec::he("decoder.base.weight", [ch[0], d, 3, 3], d * 9));
    specs.push(ParamSpec::zeros("decoder.base.bias", ch[0]));
    for s in 1..=c.stages() {
        let mut c_in = ch[s - 1];
        if s <= c.skip_sources.len() {
            specs.push(ParamSpec::lecun(
                format!("decoder.stage{s}.skip.weight"),
                [ch[s], d, 1, 1],
                d,
            ));
            specs.push(ParamSpec::zeros(format!("decoder.stage{s}.skip.bias"), ch[s]));
            c_in += ch[s];
        }
        specs.push(ParamSpec::he(
            format!("decoder.stage{s}.conv.weight"),
            [ch[s], c_in, 3, 3],
            c_in * 9,
        ));
        specs.push(ParamSpec::zeros(format!("decoder.stage{s}.conv.bias"), ch[s]));
    }
    for (r, w) in ch.windows(2).skip(c.stages()).enumerate() {
        let r = r + 1;
        specs.push(ParamSpec::he(
            format!("decoder.refine{r}.weight"),
            [w[1], w[0], 3, 3],
            w[0] * 9,
        ));
        specs.push(ParamSpec::zeros(format!("decoder.refine{r}.bias"), w[1]));
    }
    let last = *ch.last().expect("validated non-empty");
    specs.push(ParamSpec::lecun("head.weight", [1, last, 1, 1], last));
    specs.push(ParamSpec::head_bias("head.bias"));
    specs
}

pub(super) fn macs(c: &TrustConfig) -> u64 {
    let (d, p2, t) = (
        c.embed_dim as u64,
        (c.patch_size * c.patch_size) as u64,
        c.num_tokens() as u64,
    );
    let hidden = c.mlp_ratio as u64 * d;
    let mut total = t * p2 * d;
    total += c.encoder_depth as u64 * (4 * t * d * d + 2 * t * t * d + 2 * t * d * hidden);
    let ch: Vec<u64> = c.decoder_channels.iter().map(|&v| v as u64).collect();
    let pool = c.pool_grid as u64;
    let g2 = c.num_tokens() as u64;
    total += pool * pool * ch[0] * d * 9;
    for s in 1..=c.stages() {
        let res = pool << s;
        let mut c_in = ch[s - 1];
        if s <= c.skip_sources.len() {
            c_in += ch[s];
            if c.skip_enabled[s - 1] {
                total += g2 * ch[s] * d;
            }
        }
        total += res * res * ch[s] * c_in * 9;
    }
    let full = c.image_size as u64 * c.image_size as u64;
    for w in ch.windows(2).skip(c.stages()) {
        total += full * w[1] * w[0] * 9;
    }
    total + full * ch[ch.len() - 1]
}

/// Handles into a recorded TRUST forward pass.
#[derive(Clone, Debug)]
pub struct TrustGraph {
    /// `1×H×W`, values in `(0, 1)`.
    pub output: Var,
    /// Token features `[T×d]` after each encoder block.
    pub block_outputs: Vec<Var>,
    /// Post-softmax attention `[T×T]` per block, per head.
    pub attention: Vec<Vec<Var>>,
}

fn linear(tape: &mut Tape, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn conv(tape: &mut Tape, p: &Bound, x: Var, prefix: &str, padding: usize) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    tape.conv2d(x, w, Some(b), 1, padding)
}

/// Scaled scores `QₕKₕᵀ/√d_k` for every head.
fn head_scores(tape: &mut Tape, c: &TrustConfig, q: Var, k: Var) -> Result<Vec<Var>> {
    let dk = c.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    (0..c.num_heads)
        .map(|h| {
            let qh = tape.narrow(q, 1, h * dk, dk)?;
            let kh = tape.narrow(k, 1, h * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            Ok(tape.scalar_mul(s, scale))
        })
        .collect()
}

fn embed(tape: &mut Tape, p: &Bound, c: &TrustConfig, input: Var) -> Result<Var> {
    let patches = tape.patchify(input, c.patch_size)?;
    let x = linear(tape, p, patches, "embed")?;
    let pos = p.var("embed.pos")?;
    tape.add(x, pos)
}

fn tokens_to_grid(tape: &mut Tape, c: &TrustConfig, x: Var) -> Result<Var> {
    let xt = tape.transpose(x)?;
    tape.reshape(xt, [c.embed_dim, c.token_side(), c.token_side()])
}

pub fn trust_graph(tape: &mut Tape, p: &Bound, c: &TrustConfig, input: Var) -> Result<TrustGraph> {
    let mut x = embed(tape, p, c, input)?;
    let dk = c.head_dim();
    let mut block_outputs = Vec::with_capacity(c.encoder_depth);
    let mut attention = Vec::with_capacity(c.encoder_depth);
    for b in 1..=c.encoder_depth {
        let q = linear(tape, p, x, &format!("block{b}.attn.q"))?;
        let k = linear(tape, p, x, &format!("block{b}.attn.k"))?;
        let v = linear(tape, p, x, &format!("block{b}.attn.v"))?;
        let mut heads = Vec::with_capacity(c.num_heads);
        let mut probs = Vec::with_capacity(c.num_heads);
        for (h, s) in head_scores(tape, c, q, k)?.into_iter().enumerate() {
            let a = tape.softmax(s, 1)?;
            let vh = tape.narrow(v, 1, h * dk, dk)?;
            heads.push(tape.matmul(a, vh)?);
            probs.push(a);
        }
        let o = tape.concat(&heads, 1)?;
        let o = linear(tape, p, o, &format!("block{b}.attn.o"))?;
        let r = tape.add(x, o)?;
        let r = tape.layernorm(
            r,
            p.var(&format!("block{b}.ln1.gamma"))?,
            p.var(&format!("block{b}.ln1.beta"))?,
        )?;
        let m = linear(tape, p, r, &format!("block{b}.mlp.fc1"))?;
        let m = tape.gelu(m);
        let m = linear(tape, p, m, &format!("block{b}.mlp.fc2"))?;
        let r2 = tape.add(r, m)?;
        x = tape.layernorm(
            r2,
            p.var(&format!("block{b}.ln2.gamma"))?,
            p.var(&format!("block{b}.ln2.beta"))?,
        )?;
        tape.set_label(x, format!("block{b}.output"));
        block_outputs.push(x);
        attention.push(probs);
    }

    let grid = tokens_to_grid(tape, c, x)?;
    let pooled = tape.adaptive_avg_pool(grid, c.pool_grid, c.pool_grid)?;
    let base = conv(tape, p, pooled, "decoder.base", 1)?;
    let mut h = tape.relu(base);
    for s in 1..=c.stages() {
        let res = c.pool_grid << s;
        let up = tape.upsample_nearest(h, 2)?;
        let merged = if s <= c.skip_sources.len() {
            let channels = c.decoder_channels[s];
            let skip = if c.skip_enabled[s - 1] {
                let src = block_outputs[c.skip_sources[s - 1] - 1];
                let g = tokens_to_grid(tape, c, src)?;
                let projected = conv(tape, p, g, &format!("decoder.stage{s}.skip"), 0)?;
                tape.resize_bilinear(projected, res, res)?
            } else {
                tape.constant([channels, res, res], vec![0.0; channels * res * res])?
            };
            tape.concat(&[up, skip], 0)?
        } else {
            up
        };
        let y = conv(tape, p, merged, &format!("decoder.stage{s}.conv"), 1)?;
        h = tape.relu(y);
        tape.set_label(h, format!("decoder.stage{s}.output"));
    }
    for r in 1..c.decoder_channels.len() - c.stages() {
        let y = conv(tape, p, h, &format!("decoder.refine{r}"), 1)?;
        h = tape.relu(y);
    }
    let logits = conv(tape, p, h, "head", 0)?;
    let output = tape.sigmoid(logits);
    tape.set_label(output, "output");
    Ok(TrustGraph {
        output,
        block_outputs,
        attention,
    })
}

pub(super) fn check_input(image_size: usize, y: &Tensor) -> Result<()> {
    match y.shape() {
        [h, w] | [1, h, w] if *h == image_size && *w == image_size => Ok(()),
        other => Err(Error::dim(
            "forward",
            format!("expected a {image_size}x{image_size} image, got shape {other:?}"),
        )),
    }
}

pub fn forward_trust(params: &ModelParams, config: &TrustConfig, y: &Tensor) -> Result<Tensor> {
    params.check(&ModelConfig::Trust(config.clone()).param_specs()?)?;
    check_input(config.image_size, y)?;
    let mut tape = Tape::new();
    let p = bind(&mut tape, params, false);
    let input = tape.leaf(y);
    let g = trust_graph(&mut tape, &p, config, input)?;
    tape.to_tensor(g.output).reshaped(y.shape().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GramMode {
    /// Head-averaged `QₕKₕᵀ/√d_k` of the first encoder block.
    Learned,
    /// Raw patch vectors as queries and keys: `PPᵀ/√(p²)`.
    RawPixel,
}

/// Pre-softmax token similarity matrix `[T×T]` of an image.
pub fn token_gram(config: &TrustConfig, params: &ModelParams, image: &Tensor, mode: GramMode) -> Result<Tensor> {
    config.validate()?;
    check_input(config.image_size, image)?;
    let mut tape = Tape::new();
    let input = tape.leaf(image);
    let gram = match mode {
        GramMode::RawPixel => {
            let patches = tape.patchify(input, config.patch_size)?;
            let t = tape.to_tensor(patches);
            let (n, dim) = (t.shape()[0], t.shape()[1]);
            return Tensor::new([n, n], raw_token_gram(t.data(), n, dim));
        }
        GramMode::Learned => {
            params.check(&ModelConfig::Trust(config.clone()).param_specs()?)?;
            let p = bind(&mut tape, params, false);
            let x = embed(&mut tape, &p, config, input)?;
            let q = linear(&mut tape, &p, x, "block1.attn.q")?;
            let k = linear(&mut tape, &p, x, "block1.attn.k")?;
            let scores = head_scores(&mut tape, config, q, k)?;
            let mut acc = scores[0];
            for s in &scores[1..] {
                acc = tape.add(acc, *s)?;
            }
            tape.scalar_mul(acc, 1.0 / config.num_heads as f64)
        }
    };
    Ok(tape.to_tensor(gram))
}

/// `PPᵀ/√dim` for row-major tokens `P` of shape `[t×dim]`.
pub fn raw_token_gram(tokens: &[f64], t: usize, dim: usize) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    let mut g = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            let a = &tokens[i * dim..(i + 1) * dim];
            let b = &tokens[j * dim..(j + 1) * dim];
            g[i * t + j] = scale * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    g
}
