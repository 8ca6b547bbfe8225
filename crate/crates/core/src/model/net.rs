//! Network graph construction on an autodiff tape.

use std::collections::{BTreeMap, HashMap};
use std::f32::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use crate::autograd::{Gradients, Tape, Var, GATHER_ZERO};
use crate::grid::Image;
use crate::prompt::{Polarity, PromptSet};
use crate::tensor::Tensor;

use super::{DecoderKind, ModelState};

pub(crate) const PROMPT_TYPES: usize = 5;
const TYPE_POSITIVE: usize = 0;
const TYPE_NEGATIVE: usize = 1;
const TYPE_BOX_TL: usize = 2;
const TYPE_BOX_BR: usize = 3;
const TYPE_NO_PROMPT: usize = 4;

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Encoder output, `[cells, embed_dim]`.
    pub grid: Var,
    /// `[1, H·W]` mask logits.
    pub logits: Var,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum IndexKind {
    Patchify,
    Unpatchify,
    Im2col,
}

type IndexKey = (IndexKind, usize, usize, usize, usize);

fn cached_index(key: IndexKey, build: impl FnOnce() -> Vec<u32>) -> Arc<Vec<u32>> {
    static CACHE: OnceLock<Mutex<HashMap<IndexKey, Arc<Vec<u32>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(idx) = cache.lock().expect("index cache poisoned").get(&key) {
        return idx.clone();
    }
    let idx = Arc::new(build());
    cache.lock().expect("index cache poisoned").insert(key, idx.clone());
    idx
}

/// `[1, H·W]` image to `[cells, p²]` patch rows.
fn patchify_index(h: usize, w: usize, p: usize) -> Arc<Vec<u32>> {
    cached_index((IndexKind::Patchify, h, w, p, 0), || {
        let (gh, gw) = (h / p, w / p);
        let mut idx = Vec::with_capacity(h * w);
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        idx.push(((gy * p + py) * w + gx * p + px) as u32);
                    }
                }
            }
        }
        idx
    })
}

/// `[cells, p²·c]` token features to `[c, H·W]` pixel maps.
fn unpatchify_index(h: usize, w: usize, p: usize, c: usize) -> Arc<Vec<u32>> {
    cached_index((IndexKind::Unpatchify, h, w, p, c), || {
        let gw = w / p;
        let mut idx = vec![0u32; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let n = (y / p) * gw + x / p;
                    let j = ((y % p) * p + x % p) * c + ch;
                    idx[ch * h * w + y * w + x] = (n * p * p * c + j) as u32;
                }
            }
        }
        idx
    })
}

/// `[c, H·W]` maps to `[c·9, H·W]` zero-padded 3×3 neighbourhoods.
fn im2col_index(h: usize, w: usize, c: usize) -> Arc<Vec<u32>> {
    cached_index((IndexKind::Im2col, h, w, c, 0), || {
        let hw = h * w;
        let mut idx = vec![GATHER_ZERO; c * 9 * hw];
        for ch in 0..c {
            for k in 0..9 {
                let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                let row = (ch * 9 + k) * hw;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            idx[row + y * w + x] = (ch * hw + sy as usize * w + sx as usize) as u32;
                        }
                    }
                }
            }
        }
        idx
    })
}

/// Fixed sinusoidal encoding of a normalised `(u, v)` location.
fn positional(u: f32, v: f32, dim: usize, out: &mut [f32]) {
    let nf = dim / 4;
    for k in 0..nf {
        let f = PI * 2f32.powf(6.0 * k as f32 / nf as f32);
        out[4 * k] = (f * u).sin();
        out[4 * k + 1] = (f * u).cos();
        out[4 * k + 2] = (f * v).sin();
        out[4 * k + 3] = (f * v).cos();
    }
}

fn image_pe(gh: usize, gw: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; gh * gw * dim];
    for gy in 0..gh {
        for gx in 0..gw {
            let n = gy * gw + gx;
            positional(
                (gy as f32 + 0.5) / gh as f32,
                (gx as f32 + 0.5) / gw as f32,
                dim,
                &mut data[n * dim..(n + 1) * dim],
            );
        }
    }
    Tensor::from_rows(gh * gw, dim, data)
}

/// Binds model tensors to tape leaves. A tensor bound twice on the same tape
/// maps to the same leaf, so gradients from several passes accumulate.
pub struct Binder<'m> {
    state: &'m ModelState,
    with_grad: bool,
    vars: HashMap<String, Var>,
}

impl<'m> Binder<'m> {
    /// Trainable tensors become gradient leaves.
    pub fn trainable(state: &'m ModelState) -> Self {
        Binder {
            state,
            with_grad: true,
            vars: HashMap::new(),
        }
    }

    /// Every tensor is a constant.
    pub fn frozen(state: &'m ModelState) -> Self {
        Binder {
            state,
            with_grad: false,
            vars: HashMap::new(),
        }
    }

    fn p(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let param = self
            .state
            .param(name)
            .unwrap_or_else(|| panic!("model has no tensor {name}"));
        let t = &param.value;
        let value = if t.shape().len() == 1 {
            Tensor::from_rows(1, t.len(), t.data().to_vec())
        } else {
            t.clone()
        };
        let v = tape.leaf(value, self.with_grad && param.trainable);
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Gradients of every bound trainable tensor, in the tensor's own shape.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.vars {
            if let Some(g) = grads.get(v) {
                let shape = self.state.param(name).expect("bound tensor").value.shape().to_vec();
                out.insert(name.clone(), Tensor::new(shape, g.data().to_vec()).expect("gradient shape"));
            }
        }
        out
    }

    fn linear(&mut self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        let w = self.p(tape, &format!("{prefix}.w"));
        let b = self.p(tape, &format!("{prefix}.b"));
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    fn adapted(&mut self, tape: &mut Tape, x: Var, prefix: &str, lora: Option<String>) -> Var {
        let y = self.linear(tape, x, prefix);
        match lora {
            Some(l) if self.state.param(&format!("{l}.a")).is_some() => {
                let a = self.p(tape, &format!("{l}.a"));
                let b = self.p(tape, &format!("{l}.b"));
                let xb = tape.matmul(x, b);
                let xba = tape.matmul(xb, a);
                let d = tape.scale(xba, self.state.lora_factor());
                tape.add(y, d)
            }
            _ => y,
        }
    }

    fn layer_norm(&mut self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        let g = self.p(tape, &format!("{prefix}.g"));
        let b = self.p(tape, &format!("{prefix}.b"));
        tape.layer_norm(x, g, b)
    }

    fn mlp(&mut self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        let h = self.linear(tape, x, &format!("{prefix}.fc1"));
        let h = tape.gelu(h);
        self.linear(tape, h, &format!("{prefix}.fc2"))
    }

    fn attention(&mut self, tape: &mut Tape, q_in: Var, k_in: Var, v_in: Var, prefix: &str, layer: Option<usize>) -> Var {
        let q = self.adapted(tape, q_in, &format!("{prefix}.q"), layer.map(|i| format!("lora.{i}.q")));
        let k = self.linear(tape, k_in, &format!("{prefix}.k"));
        let v = self.adapted(tape, v_in, &format!("{prefix}.v"), layer.map(|i| format!("lora.{i}.v")));
        let heads = self.state.config.attention_heads;
        let dh = self.state.config.embed_dim / heads;
        let inv = 1.0 / (dh as f32).sqrt();
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                let s = tape.matmul_t(qh, kh, false, true);
                let s = tape.scale(s, inv);
                let a = tape.softmax_rows(s);
                tape.matmul(a, vh)
            })
            .collect();
        let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.linear(tape, o, &format!("{prefix}.o"))
    }

    /// Returns `(grid [cells, D], skip [skip_channels, H·W])`.
    pub fn encode(&mut self, tape: &mut Tape, image: &Image) -> (Var, Var) {
        let cfg = self.state.config.clone();
        let (h, w) = cfg.image_size;
        let p = cfg.patch_size;
        let norm: Vec<f32> = image.data().iter().map(|&v| (v - 128.0) / 64.0).collect();
        let x = tape.constant(Tensor::from_rows(1, h * w, norm));

        let patches = tape.gather(x, patchify_index(h, w, p), cfg.tokens(), p * p);
        let mut t = self.linear(tape, patches, "enc.patch");
        let pos = self.p(tape, "enc.pos");
        t = tape.add(t, pos);
        for i in 0..cfg.encoder_layers {
            let a = self.layer_norm(tape, t, &format!("enc.{i}.ln1"));
            let a = self.attention(tape, a, a, a, &format!("enc.{i}.attn"), Some(i));
            t = tape.add(t, a);
            let m = self.layer_norm(tape, t, &format!("enc.{i}.ln2"));
            let m = self.mlp(tape, m, &format!("enc.{i}.mlp"));
            t = tape.add(t, m);
        }
        let grid = self.layer_norm(tape, t, "enc.ln_out");

        let cols = tape.gather(x, im2col_index(h, w, 1), 9, h * w);
        let sw = self.p(tape, "enc.stem.w");
        let sb = self.p(tape, "enc.stem.b");
        let s = tape.matmul(sw, cols);
        let s = tape.add_col(s, sb);
        let s = tape.relu(s);
        let skip = tape.concat_rows(&[x, s]);
        (grid, skip)
    }

    /// `[tokens, D]`; an empty set gives exactly the no-prompt token.
    pub fn encode_prompts(&mut self, tape: &mut Tape, prompts: &PromptSet) -> Var {
        let cfg = &self.state.config;
        let (h, w) = cfg.image_size;
        let d = cfg.embed_dim;
        let mut entries: Vec<(usize, Option<(usize, usize)>)> = Vec::new();
        for b in &prompts.boxes {
            entries.push((TYPE_BOX_TL, Some((b.row_min, b.col_min))));
            entries.push((TYPE_BOX_BR, Some((b.row_max, b.col_max))));
        }
        for pt in &prompts.points {
            let ty = match pt.polarity {
                Polarity::Positive => TYPE_POSITIVE,
                Polarity::Negative => TYPE_NEGATIVE,
            };
            entries.push((ty, Some((pt.row, pt.col))));
        }
        if entries.is_empty() {
            entries.push((TYPE_NO_PROMPT, None));
        }
        let n = entries.len();
        let mut index = Vec::with_capacity(n * d);
        let mut pe = vec![0.0; n * d];
        for (t, &(ty, at)) in entries.iter().enumerate() {
            index.extend((0..d).map(|j| (ty * d + j) as u32));
            if let Some((r, c)) = at {
                positional(
                    (r as f32 + 0.5) / h as f32,
                    (c as f32 + 0.5) / w as f32,
                    d,
                    &mut pe[t * d..(t + 1) * d],
                );
            }
        }
        let types = self.p(tape, "prm.type");
        let emb = tape.gather(types, Arc::new(index), n, d);
        let pe = tape.constant(Tensor::from_rows(n, d, pe));
        tape.add(emb, pe)
    }

    /// `[head_channels, H·W]` features ahead of the output layer.
    fn features(&mut self, tape: &mut Tape, z: Var, skip: Var) -> Var {
        let cfg = self.state.config.clone();
        let (h, w) = cfg.image_size;
        let u = self.linear(tape, z, "dec.up");
        let up = tape.gather(
            u,
            unpatchify_index(h, w, cfg.patch_size, cfg.up_channels),
            cfg.up_channels,
            h * w,
        );
        let f = tape.concat_rows(&[up, skip]);
        let c_in = cfg.up_channels + cfg.skip_channels;
        let h1 = self.conv3x3(tape, f, c_in, "dec.conv1");
        let h1 = tape.relu(h1);
        let h2 = self.conv3x3(tape, h1, cfg.head_channels, "dec.conv2");
        tape.relu(h2)
    }

    /// 1x1 output layer; `dynamic` adds per-prompt weights to the static ones.
    fn output(&mut self, tape: &mut Tape, h: Var, dynamic: Option<Var>) -> Var {
        let mut ow = self.p(tape, "dec.out.w");
        if let Some(d) = dynamic {
            ow = tape.add(ow, d);
        }
        let ob = self.p(tape, "dec.out.b");
        let o = tape.matmul(ow, h);
        tape.add_col(o, ob)
    }

    fn conv3x3(&mut self, tape: &mut Tape, x: Var, channels: usize, prefix: &str) -> Var {
        let (h, w) = self.state.config.image_size;
        let cols = tape.gather(x, im2col_index(h, w, channels), channels * 9, h * w);
        let wt = self.p(tape, &format!("{prefix}.w"));
        let b = self.p(tape, &format!("{prefix}.b"));
        let y = tape.matmul(wt, cols);
        tape.add_col(y, b)
    }

    pub fn plain_decode(&mut self, tape: &mut Tape, grid: Var, skip: Var) -> Var {
        let m = self.mlp(tape, grid, "dec.mlp");
        let z = tape.add(grid, m);
        let z = self.layer_norm(tape, z, "dec.ln");
        let h = self.features(tape, z, skip);
        self.output(tape, h, None)
    }

    /// Two-way attention between a learned mask token plus the prompt tokens
    /// and the image grid. The mask token, after a last look at the updated
    /// grid, is mapped to per-prompt output weights.
    pub fn prompt_decode(&mut self, tape: &mut Tape, grid: Var, skip: Var, tokens: Var) -> Var {
        let (gh, gw) = self.state.config.grid();
        let d = self.state.config.embed_dim;
        let pe = tape.constant(image_pe(gh, gw, d));
        let mask_token = self.p(tape, "dec.mask_token");
        let tokens = tape.concat_rows(&[mask_token, tokens]);
        let keyed = tape.add(grid, pe);
        let a = self.attention(tape, tokens, keyed, grid, "dec.t2i", None);
        let t1 = tape.add(tokens, a);
        let t1 = self.layer_norm(tape, t1, "dec.t2i.ln");
        let b = self.attention(tape, keyed, t1, t1, "dec.i2t", None);
        let z1 = tape.add(grid, b);
        let z1 = self.layer_norm(tape, z1, "dec.i2t.ln");
        let m = self.mlp(tape, z1, "dec.mlp");
        let z2 = tape.add(z1, m);
        let z2 = self.layer_norm(tape, z2, "dec.ln");

        let keyed2 = tape.add(z2, pe);
        let c = self.attention(tape, t1, keyed2, z2, "dec.final", None);
        let t2 = tape.add(t1, c);
        let t2 = self.layer_norm(tape, t2, "dec.final.ln");
        let first = tape.gather(t2, Arc::new((0..d as u32).collect()), 1, d);
        let dynamic = self.mlp(tape, first, "dec.hyper");
        let h = self.features(tape, z2, skip);
        self.output(tape, h, Some(dynamic))
    }

    /// Full pass. Prompts are ignored by the plain head; the prompt decoder
    /// treats `None` as the empty set.
    pub fn forward(&mut self, tape: &mut Tape, image: &Image, prompts: Option<&PromptSet>) -> ForwardOutput {
        let (grid, skip) = self.encode(tape, image);
        let logits = match self.state.config.decoder_kind {
            DecoderKind::PlainConvHead => self.plain_decode(tape, grid, skip),
            DecoderKind::PromptDecoder => {
                let empty = PromptSet::default();
                let tokens = self.encode_prompts(tape, prompts.unwrap_or(&empty));
                self.prompt_decode(tape, grid, skip, tokens)
            }
        };
        ForwardOutput { grid, logits }
    }
}
