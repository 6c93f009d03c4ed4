//! Desk-scale dual encoder: a patch-embedding vision tower and a token
//! embedding text tower, each with pre-LayerNorm transformer blocks, a final
//! LayerNorm, and a linear head into a shared feature space.
//!
//! Parameters live in a name-keyed registry so snapshots, restores, and
//! scope selection are exact. Every LayerNorm gamma/beta carries an
//! `is_layernorm` flag; those are the only tensors the adaptation loop is
//! allowed to touch under the `ln_*` scopes.

pub mod checkpoint;
pub mod pretrain;
pub mod tokenizer;

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use tokenizer::{tokenize, PromptTemplate, Vocab, PAD_ID};

/// LayerNorm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

/// Architecture description; serialized verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub max_text_len: usize,
    pub vocab: Vec<String>,
}

impl ArchConfig {
    /// The default tower pair: 4x4 patches of 16x16x3 images, two
    /// pre-LayerNorm blocks of width 64 with 4 heads per tower, and a
    /// linear head into a 32-dimensional shared space.
    pub fn default_arch(vocab: Vocab) -> ArchConfig {
        ArchConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            width: 64,
            heads: 4,
            mlp_hidden: 256,
            depth: 2,
            embed_dim: 32,
            max_text_len: 12,
            vocab: vocab.words().to_vec(),
        }
    }

    /// Width-scaled variant used by the gradient audit.
    pub fn scaled(width: usize, vocab: Vocab) -> ArchConfig {
        ArchConfig {
            width,
            heads: (width / 16).max(2),
            mlp_hidden: 4 * width,
            embed_dim: (width / 2).max(4),
            ..ArchConfig::default_arch(vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by head count {}",
                self.width, self.heads
            )));
        }
        if self.vocab.len() < 3 {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn vocab_obj(&self) -> Vocab {
        Vocab::from_words(self.vocab.clone())
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub is_layernorm: bool,
}

/// Parameter scope selectors for adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeSelector {
    LnBoth,
    LnVision,
    LnText,
    All,
    None,
}

impl std::fmt::Display for ScopeSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ScopeSelector::LnBoth => "ln_both",
            ScopeSelector::LnVision => "ln_vision",
            ScopeSelector::LnText => "ln_text",
            ScopeSelector::All => "all",
            ScopeSelector::None => "none",
        };
        f.write_str(s)
    }
}

/// A resolved scope: the selector plus the sorted parameter names it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamScope {
    pub selector: ScopeSelector,
    pub resolved: Vec<String>,
}

/// Paired vision/text encoders with a shared feature dimension and the
/// frozen softmax temperature from pretraining.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub arch: ArchConfig,
    params: BTreeMap<String, Param>,
    pub tau: f64,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

impl DualEncoder {
    /// Random initialization from a seed. Identical seeds produce
    /// bit-identical models.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<DualEncoder> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();

        let add = |params: &mut BTreeMap<String, Param>,
                       rng: &mut ChaCha8Rng,
                       name: String,
                       shape: Vec<usize>,
                       is_ln: bool,
                       init: Init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
            };
            params.insert(name, Param { data, shape, is_layernorm: is_ln });
        };

        let w = arch.width;
        let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();

        for tower in ["vision", "text"] {
            if tower == "vision" {
                add(
                    &mut params,
                    &mut rng,
                    "vision.patch.w".into(),
                    vec![arch.patch_dim(), w],
                    false,
                    Init::Normal(xavier(arch.patch_dim(), w)),
                );
                add(&mut params, &mut rng, "vision.patch.b".into(), vec![w], false, Init::Zeros);
                add(
                    &mut params,
                    &mut rng,
                    "vision.pos".into(),
                    vec![arch.n_patches(), w],
                    false,
                    Init::Normal(0.02),
                );
            } else {
                add(
                    &mut params,
                    &mut rng,
                    "text.embed".into(),
                    vec![arch.vocab.len(), w],
                    false,
                    Init::Normal(0.02),
                );
                add(
                    &mut params,
                    &mut rng,
                    "text.pos".into(),
                    vec![arch.max_text_len, w],
                    false,
                    Init::Normal(0.02),
                );
            }
            for blk in 0..arch.depth {
                let p = format!("{tower}.block{blk}");
                add(&mut params, &mut rng, format!("{p}.ln1.g"), vec![w], true, Init::Ones);
                add(&mut params, &mut rng, format!("{p}.ln1.b"), vec![w], true, Init::Zeros);
                for proj in ["wq", "wk", "wv", "wo"] {
                    add(
                        &mut params,
                        &mut rng,
                        format!("{p}.attn.{proj}"),
                        vec![w, w],
                        false,
                        Init::Normal(xavier(w, w)),
                    );
                }
                for bias in ["bq", "bk", "bv", "bo"] {
                    add(&mut params, &mut rng, format!("{p}.attn.{bias}"), vec![w], false, Init::Zeros);
                }
                add(&mut params, &mut rng, format!("{p}.ln2.g"), vec![w], true, Init::Ones);
                add(&mut params, &mut rng, format!("{p}.ln2.b"), vec![w], true, Init::Zeros);
                add(
                    &mut params,
                    &mut rng,
                    format!("{p}.mlp.w1"),
                    vec![w, arch.mlp_hidden],
                    false,
                    Init::Normal(xavier(w, arch.mlp_hidden)),
                );
                add(&mut params, &mut rng, format!("{p}.mlp.b1"), vec![arch.mlp_hidden], false, Init::Zeros);
                add(
                    &mut params,
                    &mut rng,
                    format!("{p}.mlp.w2"),
                    vec![arch.mlp_hidden, w],
                    false,
                    Init::Normal(xavier(arch.mlp_hidden, w)),
                );
                add(&mut params, &mut rng, format!("{p}.mlp.b2"), vec![w], false, Init::Zeros);
            }
            add(&mut params, &mut rng, format!("{tower}.ln_f.g"), vec![w], true, Init::Ones);
            add(&mut params, &mut rng, format!("{tower}.ln_f.b"), vec![w], true, Init::Zeros);
            add(
                &mut params,
                &mut rng,
                format!("{tower}.head.w"),
                vec![w, arch.embed_dim],
                false,
                Init::Normal(xavier(w, arch.embed_dim)),
            );
            add(&mut params, &mut rng, format!("{tower}.head.b"), vec![arch.embed_dim], false, Init::Zeros);
        }

        Ok(DualEncoder { arch, params, tau: 0.07 })
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn param_data_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.params.get_mut(name).map(|p| &mut p.data)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Param> {
        &mut self.params
    }

    pub fn total_param_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn layernorm_param_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.is_layernorm)
            .map(|p| p.data.len())
            .sum()
    }

    /// Resolve a scope selector against this model's registry. The result
    /// is sorted by name and stable for a fixed model.
    pub fn resolve_scope(&self, selector: ScopeSelector) -> ParamScope {
        let resolved: Vec<String> = self
            .params
            .iter()
            .filter(|(name, p)| match selector {
                ScopeSelector::LnBoth => p.is_layernorm,
                ScopeSelector::LnVision => p.is_layernorm && name.starts_with("vision."),
                ScopeSelector::LnText => p.is_layernorm && name.starts_with("text."),
                ScopeSelector::All => true,
                ScopeSelector::None => false,
            })
            .map(|(name, _)| name.clone())
            .collect();
        ParamScope { selector, resolved }
    }

    /// Start a forward pass; parameters named in `trainable` become
    /// gradient-carrying leaves, everything else enters as constants.
    pub fn begin(&self, trainable: &[String]) -> ForwardPass<'_> {
        let trainable: BTreeSet<String> = trainable.iter().cloned().collect();
        let mut graph = Graph::new();
        let mut leaves = BTreeMap::new();
        for (name, p) in &self.params {
            let requires = trainable.contains(name);
            let id = graph
                .leaf(p.data.clone(), p.shape.clone(), requires)
                .expect("registry shapes are consistent");
            leaves.insert(name.clone(), id);
        }
        ForwardPass { model: self, graph, leaves, trainable }
    }

    /// Image features without gradient tracking; returns row-major `[n, d]`.
    pub fn encode_image_eval(&self, pixels: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut pass = self.begin(&[]);
        let id = pass.encode_images(pixels, n)?;
        Ok(pass.graph.data(id).to_vec())
    }

    /// Text features for every class of the prompt; row-major `[C, d]`.
    pub fn encode_text_eval(&self, prompt: &PromptTemplate) -> Result<Vec<f64>> {
        let mut pass = self.begin(&[]);
        let id = pass.encode_text(prompt)?;
        Ok(pass.graph.data(id).to_vec())
    }
}

/// One forward pass over a [`DualEncoder`]: owns the graph plus the mapping
/// from parameter names to graph leaves.
pub struct ForwardPass<'m> {
    model: &'m DualEncoder,
    pub graph: Graph,
    leaves: BTreeMap<String, TensorId>,
    trainable: BTreeSet<String>,
}

impl<'m> ForwardPass<'m> {
    pub fn param_id(&self, name: &str) -> TensorId {
        *self.leaves.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.model.arch
    }

    /// Encode a batch of `n` images given as NHWC pixels in `[0,1]`.
    /// Output is `[n, embed_dim]`, one feature row per image.
    pub fn encode_images(&mut self, pixels: &[f64], n: usize) -> Result<TensorId> {
        let a = &self.model.arch;
        let px_per_img = a.image_size * a.image_size * a.channels;
        if pixels.len() != n * px_per_img {
            return Err(Error::Dimension(format!(
                "expected {n} images of {}x{}x{} ({} values), got {}",
                a.image_size,
                a.image_size,
                a.channels,
                n * px_per_img,
                pixels.len()
            )));
        }
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let img = &pixels[i * px_per_img..(i + 1) * px_per_img];
            let feat = self.encode_one_image(img)?;
            rows.push(feat);
        }
        self.graph.concat_rows(&rows)
    }

    fn encode_one_image(&mut self, img: &[f64]) -> Result<TensorId> {
        let a = &self.model.arch;
        let (ps, pside, ch) = (a.patch_size, a.patches_per_side(), a.channels);
        let mut patches = Vec::with_capacity(a.n_patches() * a.patch_dim());
        for py in 0..pside {
            for px in 0..pside {
                for dy in 0..ps {
                    for dx in 0..ps {
                        let y = py * ps + dy;
                        let x = px * ps + dx;
                        let base = (y * a.image_size + x) * ch;
                        patches.extend_from_slice(&img[base..base + ch]);
                    }
                }
            }
        }
        let g = &mut self.graph;
        let patches = g.constant(patches, vec![a.n_patches(), a.patch_dim()])?;
        let pw = self.leaves["vision.patch.w"];
        let pb = self.leaves["vision.patch.b"];
        let pos = self.leaves["vision.pos"];
        let mut x = g.matmul(patches, pw)?;
        x = g.add_row(x, pb)?;
        x = g.add(x, pos)?;
        let x = self.tower("vision", x)?;
        self.project_out("vision", x)
    }

    /// Encode every class of the prompt; output `[C, embed_dim]` with row
    /// order matching `class_names`.
    pub fn encode_text(&mut self, prompt: &PromptTemplate) -> Result<TensorId> {
        let a = &self.model.arch;
        let vocab = a.vocab_obj();
        let mut rows = Vec::with_capacity(prompt.class_count());
        for c in 0..prompt.class_count() {
            let ids = tokenize(&vocab, prompt, c, a.max_text_len).map_err(|e| {
                Error::Tokenizer(format!("class \"{}\": {e}", prompt.class_names[c]))
            })?;
            // run the natural-length prefix; padding never enters attention
            let len = ids.iter().rposition(|&id| id != PAD_ID).map_or(0, |p| p + 1);
            if len == 0 {
                return Err(Error::Tokenizer(format!(
                    "class \"{}\" tokenized to an empty sequence",
                    prompt.class_names[c]
                )));
            }
            let ids: Vec<usize> = ids[..len].iter().map(|&v| v as usize).collect();
            let g = &mut self.graph;
            let emb = g.embed_rows(self.leaves["text.embed"], &ids)?;
            let pos = g.slice_rows(self.leaves["text.pos"], 0, len)?;
            let x = g.add(emb, pos)?;
            let x = self.tower("text", x)?;
            let feat = self.project_out("text", x)?;
            rows.push(feat);
        }
        self.graph.concat_rows(&rows)
    }

    /// Pre-LayerNorm transformer blocks over a `[seq, width]` sequence.
    fn tower(&mut self, tower: &str, mut x: TensorId) -> Result<TensorId> {
        let a = &self.model.arch;
        let (heads, hd) = (a.heads, a.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        for blk in 0..a.depth {
            let p = format!("{tower}.block{blk}");
            let g = &mut self.graph;
            let x1 = g.layer_norm(
                x,
                self.leaves[&format!("{p}.ln1.g")],
                self.leaves[&format!("{p}.ln1.b")],
                LN_EPS,
            )?;
            let mut q = g.matmul(x1, self.leaves[&format!("{p}.attn.wq")])?;
            q = g.add_row(q, self.leaves[&format!("{p}.attn.bq")])?;
            let mut k = g.matmul(x1, self.leaves[&format!("{p}.attn.wk")])?;
            k = g.add_row(k, self.leaves[&format!("{p}.attn.bk")])?;
            let mut v = g.matmul(x1, self.leaves[&format!("{p}.attn.wv")])?;
            v = g.add_row(v, self.leaves[&format!("{p}.attn.bv")])?;
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice_cols(q, h * hd, hd)?;
                let kh = g.slice_cols(k, h * hd, hd)?;
                let vh = g.slice_cols(v, h * hd, hd)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scaled = g.scale(scores, scale);
                let attn = g.softmax_rows(scaled)?;
                head_outs.push(g.matmul(attn, vh)?);
            }
            let cat = g.concat_cols(&head_outs)?;
            let mut o = g.matmul(cat, self.leaves[&format!("{p}.attn.wo")])?;
            o = g.add_row(o, self.leaves[&format!("{p}.attn.bo")])?;
            x = g.add(x, o)?;
            let x2 = g.layer_norm(
                x,
                self.leaves[&format!("{p}.ln2.g")],
                self.leaves[&format!("{p}.ln2.b")],
                LN_EPS,
            )?;
            let mut m = g.matmul(x2, self.leaves[&format!("{p}.mlp.w1")])?;
            m = g.add_row(m, self.leaves[&format!("{p}.mlp.b1")])?;
            m = g.gelu(m);
            m = g.matmul(m, self.leaves[&format!("{p}.mlp.w2")])?;
            m = g.add_row(m, self.leaves[&format!("{p}.mlp.b2")])?;
            x = g.add(x, m)?;
        }
        Ok(x)
    }

    /// Final LayerNorm, sequence mean-pool, and the linear head.
    fn project_out(&mut self, tower: &str, x: TensorId) -> Result<TensorId> {
        let g = &mut self.graph;
        let normed = g.layer_norm(
            x,
            self.leaves[&format!("{tower}.ln_f.g")],
            self.leaves[&format!("{tower}.ln_f.b")],
            LN_EPS,
        )?;
        let pooled = g.mean_axis0(normed)?;
        let mut out = g.matmul(pooled, self.leaves[&format!("{tower}.head.w")])?;
        out = g.add_row(out, self.leaves[&format!("{tower}.head.b")])?;
        Ok(out)
    }

    /// Collect gradients of every trainable parameter after `backward`.
    /// Missing gradients are a contract violation (the parameter did not
    /// participate in the loss).
    pub fn grads(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for name in &self.trainable {
            let id = self.leaves[name];
            let g = self.graph.grad(id).ok_or_else(|| {
                Error::Contract(format!("no gradient for scoped parameter {name}"))
            })?;
            out.insert(name.clone(), g.to_vec());
        }
        Ok(out)
    }
}
