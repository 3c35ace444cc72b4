//! A small frozen vision transformer with per-block bottleneck adapters.
//!
//! Blocks are pre-norm: `x^ = x + Attn(LN(x))`, then the MLP branch. With an adapter the
//! block output is `x^ + MLP(LN(x^)) + ReLU(x^ W_down) W_up`, the adapter reading `x^`
//! directly. The sequential placement instead adapts the block output `z` as
//! `z + ReLU(z W_down) W_up`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.image_height, self.image_width, self.channels, self.patch_size, self.embed_dim, self.depth, self.heads, self.mlp_ratio];
        if dims.contains(&0) {
            return Err(Error::Invalid("backbone dimensions must be positive".into()));
        }
        if !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return Err(Error::Invalid(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads)));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_height, self.image_width, self.channels]
    }

    pub fn image_len(&self) -> usize {
        self.image_height * self.image_width * self.channels
    }
}

/// Where the adapter branch attaches inside a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPlacement {
    /// Adapter reads the post-attention representation and adds to the MLP branch.
    #[default]
    Parallel,
    /// Adapter reads the block output and adds its transformation on top of it.
    Sequential,
}

struct Block<T> {
    ln1_g: Tensor<T>,
    ln1_b: Tensor<T>,
    wq: Tensor<T>,
    bq: Tensor<T>,
    wk: Tensor<T>,
    bk: Tensor<T>,
    wv: Tensor<T>,
    bv: Tensor<T>,
    wo: Tensor<T>,
    bo: Tensor<T>,
    ln2_g: Tensor<T>,
    ln2_b: Tensor<T>,
    fc1_w: Tensor<T>,
    fc1_b: Tensor<T>,
    fc2_w: Tensor<T>,
    fc2_b: Tensor<T>,
}

impl<T: Real> Block<T> {
    fn named(&self) -> [(&'static str, &Tensor<T>); 16] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("fc1_w", &self.fc1_w),
            ("fc1_b", &self.fc1_b),
            ("fc2_w", &self.fc2_w),
            ("fc2_b", &self.fc2_b),
        ]
    }
}

fn frozen<T: Real>(shape: &[usize], data: Vec<f64>) -> Tensor<T> {
    Tensor::new(shape, data.into_iter().map(T::lit).collect()).expect("shape matches").with_grad(false)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Seed-initialised transformer whose weights never change after construction.
pub struct FrozenBackbone<T> {
    config: BackboneConfig,
    patch_w: Tensor<T>,
    patch_b: Tensor<T>,
    cls: Tensor<T>,
    pos: Tensor<T>,
    blocks: Vec<Block<T>>,
    norm_g: Tensor<T>,
    norm_b: Tensor<T>,
}

impl<T: Real> FrozenBackbone<T> {
    /// Variance-preserving random initialisation, so patch content reaches the [CLS] output.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let pd = config.patch_dim();
        let lin = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
            frozen::<T>(&[fan_in, fan_out], gaussian(rng, fan_in * fan_out, 1.0 / (fan_in as f64).sqrt()))
        };
        let bias = |rng: &mut ChaCha8Rng, n: usize| frozen::<T>(&[n], gaussian(rng, n, 0.02));
        let ones = |n: usize| frozen::<T>(&[n], vec![1.0; n]);
        let zeros = |n: usize| frozen::<T>(&[n], vec![0.0; n]);

        let patch_w = lin(&mut rng, pd, d);
        let patch_b = bias(&mut rng, d);
        let cls = frozen(&[d], gaussian(&mut rng, d, 0.5));
        let pos = frozen(&[config.num_tokens(), d], gaussian(&mut rng, config.num_tokens() * d, 0.5));
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                wq: lin(&mut rng, d, d),
                bq: bias(&mut rng, d),
                wk: lin(&mut rng, d, d),
                bk: bias(&mut rng, d),
                wv: lin(&mut rng, d, d),
                bv: bias(&mut rng, d),
                wo: lin(&mut rng, d, d),
                bo: bias(&mut rng, d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                fc1_w: lin(&mut rng, d, hidden),
                fc1_b: bias(&mut rng, hidden),
                fc2_w: lin(&mut rng, hidden, d),
                fc2_b: bias(&mut rng, d),
            })
            .collect();
        Ok(Self { config, patch_w, patch_b, cls, pos, blocks, norm_g: ones(d), norm_b: zeros(d) })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.embed_dim
    }

    /// All frozen tensors with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("backbone.patch_w".to_string(), &self.patch_w),
            ("backbone.patch_b".to_string(), &self.patch_b),
            ("backbone.cls".to_string(), &self.cls),
            ("backbone.pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("backbone.block{i}.{n}"), t)));
        }
        out.push(("backbone.norm_g".to_string(), &self.norm_g));
        out.push(("backbone.norm_b".to_string(), &self.norm_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over every frozen value (little-endian), hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.named_params() {
            hasher.update(name.as_bytes());
            buf.clear();
            t.data().iter().for_each(|v| v.write_le(&mut buf));
            hasher.update(&buf);
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Splits an `H x W x C` image into patches and returns `[c, E]` as `(N_p + 1) x d` tokens.
    ///
    /// Pixels in `[0, 1]` are mapped to `[-1, 1]` before the patch projection.
    pub fn embed(&self, image: &[T], shape: [usize; 3]) -> Result<Vec<T>> {
        let cfg = &self.config;
        if shape != cfg.image_shape() || image.len() != cfg.image_len() {
            return Err(Error::shape(
                "embed",
                format!("image {:?} ({} values), backbone expects {:?}", shape, image.len(), cfg.image_shape()),
            ));
        }
        if image.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::Invalid("pixel values must lie in [0, 1]".into()));
        }
        let (p, c, w) = (cfg.patch_size, cfg.channels, cfg.image_width);
        let d = cfg.embed_dim;
        let (gh, gw) = (cfg.image_height / p, cfg.image_width / p);
        let two = T::lit(2.0);
        let mut patches = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    let row = (py * p + y) * w;
                    for x in 0..p {
                        let base = (row + px * p + x) * c;
                        patches.extend(image[base..base + c].iter().map(|&v| v * two - T::one()));
                    }
                }
            }
        }
        let proj = crate::diffcore::kernels::matmul(patches.as_slice(), self.patch_w.data(), gh * gw, cfg.patch_dim(), d);
        let pos = self.pos.data();
        let mut tokens = Vec::with_capacity(cfg.num_tokens() * d);
        tokens.extend(self.cls.data().iter().zip(&pos[..d]).map(|(&a, &b)| a + b));
        for (i, row) in proj.chunks(d).enumerate() {
            let prow = &pos[(i + 1) * d..(i + 2) * d];
            tokens.extend(row.iter().zip(self.patch_b.data()).zip(prow).map(|((&a, &b), &q)| a + b + q));
        }
        Ok(tokens)
    }

    /// Runs the blocks on `tokens` and returns the normalised [CLS] feature `[d]`.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        tokens: Var,
        adapters: Option<&AdapterVars>,
        placement: AdapterPlacement,
    ) -> Result<Var> {
        let cfg = &self.config;
        let expected = [cfg.num_tokens(), cfg.embed_dim];
        if tape.shape(tokens) != expected {
            return Err(Error::shape("backbone", format!("tokens {:?}, expected {:?}", tape.shape(tokens), expected)));
        }
        if let Some(a) = adapters {
            a.check(tape, cfg)?;
        }
        let mut x = tokens;
        for (i, b) in self.blocks.iter().enumerate() {
            let adapter = adapters.map(|a| (a.down[i], a.up[i]));
            x = self.block(tape, b, x, adapter, placement)?;
        }
        let cls = tape.row(x, 0)?;
        let g = tape.leaf(&self.norm_g)?;
        let bias = tape.leaf(&self.norm_b)?;
        tape.layer_norm(cls, Some(g), Some(bias))
    }

    fn block<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        b: &'a Block<T>,
        x: Var,
        adapter: Option<(Var, Var)>,
        placement: AdapterPlacement,
    ) -> Result<Var> {
        let (g1, b1) = (tape.leaf(&b.ln1_g)?, tape.leaf(&b.ln1_b)?);
        let h = tape.layer_norm(x, Some(g1), Some(b1))?;
        let q = {
            let (w, bias) = (tape.leaf(&b.wq)?, tape.leaf(&b.bq)?);
            tape.linear(h, w, Some(bias))?
        };
        let k = {
            let (w, bias) = (tape.leaf(&b.wk)?, tape.leaf(&b.bk)?);
            tape.linear(h, w, Some(bias))?
        };
        let v = {
            let (w, bias) = (tape.leaf(&b.wv)?, tape.leaf(&b.bv)?);
            tape.linear(h, w, Some(bias))?
        };
        let a = tape.attention(q, k, v, self.config.heads)?;
        let o = {
            let (w, bias) = (tape.leaf(&b.wo)?, tape.leaf(&b.bo)?);
            tape.linear(a, w, Some(bias))?
        };
        let x_hat = tape.add(x, o)?;

        let (g2, b2) = (tape.leaf(&b.ln2_g)?, tape.leaf(&b.ln2_b)?);
        let h2 = tape.layer_norm(x_hat, Some(g2), Some(b2))?;
        let m = {
            let (w, bias) = (tape.leaf(&b.fc1_w)?, tape.leaf(&b.fc1_b)?);
            let z = tape.linear(h2, w, Some(bias))?;
            let z = tape.gelu(z)?;
            let (w, bias) = (tape.leaf(&b.fc2_w)?, tape.leaf(&b.fc2_b)?);
            tape.linear(z, w, Some(bias))?
        };
        let out = tape.add(x_hat, m)?;
        let Some((down, up)) = adapter else { return Ok(out) };
        let src = match placement {
            AdapterPlacement::Parallel => x_hat,
            AdapterPlacement::Sequential => out,
        };
        let z = tape.matmul(src, down)?;
        let z = tape.relu(z)?;
        let z = tape.matmul(z, up)?;
        tape.add(out, z)
    }

    /// No-grad feature from pre-computed tokens, optionally through an adapter group.
    pub fn feature_from_tokens(&self, tokens: &[T], group: Option<&AdapterGroup<T>>, placement: AdapterPlacement) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let t = tape.constant(tokens, &[self.config.num_tokens(), self.config.embed_dim])?;
        let vars = group.map(|g| g.bind(&mut tape)).transpose()?;
        let f = self.forward(&mut tape, t, vars.as_ref(), placement)?;
        Ok(tape.value(f).to_vec())
    }

    /// `phi(x)`: the [CLS] feature with no adapters.
    pub fn extract_frozen(&self, image: &[T], shape: [usize; 3]) -> Result<Vec<T>> {
        let tokens = self.embed(image, shape)?;
        self.feature_from_tokens(&tokens, None, AdapterPlacement::Parallel)
    }

    /// `phi(x; A)`: the [CLS] feature with every block's adapter from `group` active.
    pub fn extract_adapted(&self, image: &[T], shape: [usize; 3], group: &AdapterGroup<T>, placement: AdapterPlacement) -> Result<Vec<T>> {
        let tokens = self.embed(image, shape)?;
        self.feature_from_tokens(&tokens, Some(group), placement)
    }
}

/// Tape handles for one adapter group: `down[i]` and `up[i]` for block `i`.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub down: Vec<Var>,
    pub up: Vec<Var>,
}

impl AdapterVars {
    fn check<T: Real>(&self, tape: &Tape<'_, T>, cfg: &BackboneConfig) -> Result<()> {
        if self.down.len() != cfg.depth || self.up.len() != cfg.depth {
            return Err(Error::shape("adapter", format!("{} adapters for {} blocks", self.down.len(), cfg.depth)));
        }
        let d = cfg.embed_dim;
        for (&dn, &up) in self.down.iter().zip(&self.up) {
            let (sd, su) = (tape.shape(dn), tape.shape(up));
            if sd.len() != 2 || su.len() != 2 || sd[0] != d || su[1] != d || sd[1] != su[0] {
                return Err(Error::shape("adapter", format!("W_down {sd:?}, W_up {su:?} for width {d}")));
            }
        }
        Ok(())
    }
}

/// One bottleneck adapter per block: `W_down [d, r]`, `W_up [r, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGroup<T> {
    pub down: Vec<Tensor<T>>,
    pub up: Vec<Tensor<T>>,
}

impl<T: Real> AdapterGroup<T> {
    /// `W_down ~ U(-1/sqrt(d), 1/sqrt(d))`, `W_up = 0`, so a fresh group is an exact identity.
    pub fn new(depth: usize, dim: usize, bottleneck: usize, rng: &mut impl Rng) -> Result<Self> {
        if bottleneck == 0 || dim == 0 || depth == 0 {
            return Err(Error::Invalid("adapter dimensions must be positive".into()));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mut down = Vec::with_capacity(depth);
        let mut up = Vec::with_capacity(depth);
        for _ in 0..depth {
            let w: Vec<T> = (0..dim * bottleneck).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
            down.push(Tensor::param(&[dim, bottleneck], w)?);
            up.push(Tensor::param(&[bottleneck, dim], vec![T::zero(); bottleneck * dim])?);
        }
        Ok(Self { down, up })
    }

    pub fn depth(&self) -> usize {
        self.down.len()
    }

    pub fn param_count(&self) -> usize {
        self.down.iter().chain(&self.up).map(Tensor::numel).sum()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Result<AdapterVars> {
        Ok(AdapterVars {
            down: self.down.iter().map(|t| tape.leaf(t)).collect::<Result<_>>()?,
            up: self.up.iter().map(|t| tape.leaf(t)).collect::<Result<_>>()?,
        })
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.depth());
        for (i, (d, u)) in self.down.iter().zip(&self.up).enumerate() {
            out.push((format!("{prefix}.block{i}.w_down"), d));
            out.push((format!("{prefix}.block{i}.w_up"), u));
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.down.len());
        for (i, (d, u)) in self.down.iter_mut().zip(self.up.iter_mut()).enumerate() {
            out.push((format!("{prefix}.block{i}.w_down"), d));
            out.push((format!("{prefix}.block{i}.w_up"), u));
        }
        out
    }
}
