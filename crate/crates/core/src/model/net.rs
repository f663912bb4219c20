//! Patch tokens, random masking and the encoder/decoder graph.

use rand::seq::index::sample;
use rand::Rng;

use super::{ArchConfig, LN_EPS};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mapgrid::SemanticMap;
use crate::tensor::{Scalar, Tensor};

/// Splits `[C × H × W]` into non-overlapping `p×p` patches in row-major patch
/// order. Each token lists its pixels row by row with the channels of one
/// pixel adjacent: element `(dy·p + dx)·C + c`.
pub fn patchify<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::Contract(format!("patchify needs [C, H, W], got {:?}", x.shape())));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("{h}x{w} input is not divisible into {p}x{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let d = p * p * c;
    let src = x.data();
    let mut out = vec![T::zero(); gh * gw * d];
    for pr in 0..gh {
        for pc in 0..gw {
            let tok = &mut out[(pr * gw + pc) * d..][..d];
            for dy in 0..p {
                for dx in 0..p {
                    let (r, col) = (pr * p + dy, pc * p + dx);
                    for ch in 0..c {
                        tok[(dy * p + dx) * c + ch] = src[(ch * h + r) * w + col];
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, d], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(
    tokens: &Tensor<T>,
    channels: usize,
    height: usize,
    width: usize,
    p: usize,
) -> Result<Tensor<T>> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(Error::Config(format!(
            "{height}x{width} output is not divisible into {p}x{p} patches"
        )));
    }
    let (gh, gw) = (height / p, width / p);
    let d = p * p * channels;
    if tokens.shape() != [gh * gw, d] {
        return Err(Error::dim("unpatchify", tokens.shape(), &[gh * gw, d]));
    }
    let src = tokens.data();
    let mut out = vec![T::zero(); channels * height * width];
    for pr in 0..gh {
        for pc in 0..gw {
            let tok = &src[(pr * gw + pc) * d..][..d];
            for dy in 0..p {
                for dx in 0..p {
                    let (r, col) = (pr * p + dy, pc * p + dx);
                    for ch in 0..channels {
                        out[(ch * height + r) * width + col] = tok[(dy * p + dx) * channels + ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![channels, height, width], out)
}

/// Patch tokens of the one-hot encoding of `map`, built directly from the
/// class indices. Void cells encode as all-zero pixels.
pub fn crop_tokens<T: Scalar>(map: &SemanticMap, p: usize, num_classes: usize) -> Result<Tensor<T>> {
    let (h, w) = (map.height(), map.width());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("{h}x{w} map is not divisible into {p}x{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let d = p * p * num_classes;
    let mut out = vec![T::zero(); gh * gw * d];
    for r in 0..h {
        for c in 0..w {
            let k = map.get(r, c) as usize;
            if k < num_classes {
                let tok = (r / p) * gw + c / p;
                let pix = (r % p) * p + c % p;
                out[tok * d + pix * num_classes + k] = T::one();
            }
        }
    }
    Tensor::new(vec![gh * gw, d], out)
}

/// Patch tokens `[N × p²]` of a square single-channel target.
pub fn target_tokens<T: Scalar, V: Copy + Into<f64>>(
    data: &[V],
    size: usize,
    p: usize,
) -> Result<Tensor<T>> {
    if data.len() != size * size {
        return Err(Error::dim("target_tokens", &[data.len()], &[size, size]));
    }
    let x = Tensor::from_fn(vec![1, size, size], |i| T::of(data[i].into()));
    patchify(&x, p)
}

/// Number of visible patches, `N − ⌊ρN⌋`.
pub fn visible_count(n: usize, ratio: f64) -> usize {
    // The epsilon keeps e.g. 0.7·10 from flooring to 6.
    n - ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Which patches one crop exposes to the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    /// Visible patch indices, ascending.
    pub keep: Vec<usize>,
    /// Hidden patch indices, ascending.
    pub masked: Vec<usize>,
    /// For patch `n`, its slot in `keep ++ masked`.
    pub restore: Vec<usize>,
    /// `true` where the patch is hidden.
    pub mask: Vec<bool>,
}

impl MaskSpec {
    pub fn identity(n: usize) -> Self {
        Self::from_keep(n, 0.0, (0..n).collect()).expect("identity mask is valid")
    }

    pub fn from_keep(n: usize, ratio: f64, mut keep: Vec<usize>) -> Result<Self> {
        keep.sort_unstable();
        keep.dedup();
        if keep.is_empty() || keep.last().is_some_and(|&k| k >= n) {
            return Err(Error::Contract(format!("invalid visible set for {n} patches")));
        }
        let mut mask = vec![true; n];
        for &k in &keep {
            mask[k] = false;
        }
        let masked: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        let mut restore = vec![0; n];
        for (slot, &i) in keep.iter().chain(&masked).enumerate() {
            restore[i] = slot;
        }
        Ok(MaskSpec {
            ratio,
            keep,
            masked,
            restore,
            mask,
        })
    }

    /// Uniformly random visible subset of size [`visible_count`].
    pub fn sample<R: Rng>(n: usize, ratio: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
        }
        let k = visible_count(n, ratio);
        if k == n {
            return Ok(MaskSpec {
                ratio,
                ..Self::identity(n)
            });
        }
        Self::from_keep(n, ratio, sample(rng, n, k).into_vec())
    }

    pub fn num_patches(&self) -> usize {
        self.mask.len()
    }

    pub fn num_visible(&self) -> usize {
        self.keep.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mask.len();
        let mut seen = vec![false; n];
        for &r in &self.restore {
            if r >= n || std::mem::replace(&mut seen[r], true) {
                return Err(Error::Contract("restore is not a permutation".into()));
            }
        }
        let ok = self.restore.len() == n
            && self.keep.len() + self.masked.len() == n
            && self.keep.iter().enumerate().all(|(s, &i)| i < n && self.restore[i] == s && !self.mask[i])
            && self
                .masked
                .iter()
                .enumerate()
                .all(|(s, &i)| i < n && self.restore[i] == self.keep.len() + s && self.mask[i]);
        if !ok {
            return Err(Error::Contract("inconsistent mask layout".into()));
        }
        Ok(())
    }
}

/// Visible tokens of one crop and the mask that selected them.
pub fn random_mask<T: Scalar, R: Rng>(
    tokens: &Tensor<T>,
    ratio: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, MaskSpec)> {
    let (n, _) = tokens.dims2()?;
    let spec = MaskSpec::sample(n, ratio, rng)?;
    Ok((tokens.gather_rows(&spec.keep)?, spec))
}

/// Fixed 2-D sine-cosine table `[side² × dim]`: the first half of each row
/// encodes the patch row, the second half the patch column.
pub fn sincos_pos_embed<T: Scalar>(side: usize, dim: usize) -> Tensor<T> {
    let quarter = dim / 4;
    Tensor::from_fn(vec![side * side, dim], |i| {
        let (n, j) = (i / dim, i % dim);
        let (half, k) = (j / (2 * quarter), j % (2 * quarter));
        let pos = if half == 0 { n / side } else { n % side } as f64;
        let omega = 1.0 / 10000f64.powf((k % quarter) as f64 / quarter as f64);
        T::of(if k < quarter { (pos * omega).sin() } else { (pos * omega).cos() })
    })
}

fn tile_rows<T: Scalar>(table: &Tensor<T>, rows: impl Iterator<Item = usize>) -> Result<Tensor<T>> {
    table.gather_rows(&rows.collect::<Vec<_>>())
}

/// Walks the parameter list in layout order.
struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Result<Var> {
        let v = self
            .vars
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::Contract("parameter list shorter than the layout".into()))?;
        self.pos += 1;
        Ok(v)
    }
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, cur: &mut Cursor<'_>) -> Result<Var> {
    let (w, b) = (cur.next()?, cur.next()?);
    let y = g.matmul(x, w)?;
    g.add_row_vec(y, b)
}

fn norm<T: Scalar>(g: &mut Graph<T>, x: Var, cur: &mut Cursor<'_>) -> Result<Var> {
    let (gamma, beta) = (cur.next()?, cur.next()?);
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Pre-norm transformer block over `batch` stacked sequences.
fn block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cur: &mut Cursor<'_>,
    batch: usize,
    heads: usize,
) -> Result<Var> {
    let h = norm(g, x, cur)?;
    let qkv = linear(g, h, cur)?;
    let a = g.attention(qkv, batch, heads)?;
    let a = linear(g, a, cur)?;
    let x = g.add(x, a)?;
    let h = norm(g, x, cur)?;
    let h = linear(g, h, cur)?;
    let h = g.gelu(h);
    let h = linear(g, h, cur)?;
    g.add(x, h)
}

fn check_masks(arch: &ArchConfig, masks: &[MaskSpec]) -> Result<usize> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    for m in masks {
        m.validate()?;
        if m.num_patches() != arch.num_patches() || m.num_visible() != first.num_visible() {
            return Err(Error::Contract(
                "masks disagree with the architecture or each other".into(),
            ));
        }
    }
    Ok(first.num_visible())
}

/// Encoder over the visible tokens of a batch (`[B·K × p²C]`, crop-major).
/// Consumes the patch embedding, encoder blocks and encoder norm from the
/// front of `vars`; returns the normalized latents `[B·K × E]`.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    arch: &ArchConfig,
    vars: &[Var],
    visible: &Tensor<T>,
    masks: &[MaskSpec],
) -> Result<Var> {
    let k = check_masks(arch, masks)?;
    let batch = masks.len();
    let (rows, d) = visible.dims2()?;
    if rows != batch * k || d != arch.token_dim() {
        return Err(Error::Config(format!(
            "visible tokens {rows}x{d} do not match {batch} crops of {k} tokens of length {}",
            arch.token_dim()
        )));
    }
    let mut cur = Cursor { vars, pos: 0 };
    encode_inner(g, arch, &mut cur, visible, masks)
}

fn encode_inner<T: Scalar>(
    g: &mut Graph<T>,
    arch: &ArchConfig,
    cur: &mut Cursor<'_>,
    visible: &Tensor<T>,
    masks: &[MaskSpec],
) -> Result<Var> {
    let e = arch.encoder;
    let pos = sincos_pos_embed::<T>(arch.grid_side(), e.dim);
    let pos = tile_rows(&pos, masks.iter().flat_map(|m| m.keep.iter().copied()))?;
    let x = g.constant(visible.clone());
    let x = linear(g, x, cur)?;
    let pos = g.constant(pos);
    let mut x = g.add(x, pos)?;
    for _ in 0..e.depth {
        x = block(g, x, cur, masks.len(), e.heads)?;
    }
    norm(g, x, cur)
}

fn heads<T: Scalar>(g: &mut Graph<T>, arch: &ArchConfig, x: Var, cur: &mut Cursor<'_>) -> Result<Vec<Var>> {
    arch.targets.iter().map(|_| linear(g, x, cur)).collect()
}

fn decoder_trunk<T: Scalar>(
    g: &mut Graph<T>,
    arch: &ArchConfig,
    x: Var,
    cur: &mut Cursor<'_>,
    batch: usize,
) -> Result<Var> {
    let dcfg = arch.decoder;
    let pos = sincos_pos_embed::<T>(arch.grid_side(), dcfg.dim);
    let n = arch.num_patches();
    let pos = g.constant(tile_rows(&pos, (0..batch * n).map(|i| i % n))?);
    let mut x = g.add(x, pos)?;
    for _ in 0..dcfg.depth {
        x = block(g, x, cur, batch, dcfg.heads)?;
    }
    norm(g, x, cur)
}

/// Full masked-autoencoder pass over a batch. `tokens` holds all `N` tokens
/// of every crop (`[B·N × p²C]`); `masks[b]` selects what crop `b` shows the
/// encoder. Returns one `[B·N × p²]` prediction per target.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    arch: &ArchConfig,
    vars: &[Var],
    tokens: &Tensor<T>,
    masks: &[MaskSpec],
) -> Result<Vec<Var>> {
    let k = check_masks(arch, masks)?;
    let batch = masks.len();
    let n = arch.num_patches();
    let (rows, d) = tokens.dims2()?;
    if rows != batch * n || d != arch.token_dim() {
        return Err(Error::Config(format!(
            "tokens {rows}x{d} do not match {batch} crops of {n} patches of length {}",
            arch.token_dim()
        )));
    }
    let visible_rows: Vec<usize> = masks
        .iter()
        .enumerate()
        .flat_map(|(b, m)| m.keep.iter().map(move |&i| b * n + i))
        .collect();
    let visible = tokens.gather_rows(&visible_rows)?;
    let mut cur = Cursor { vars, pos: 0 };
    let latent = encode_inner(g, arch, &mut cur, &visible, masks)?;
    let x = linear(g, latent, &mut cur)?;
    let mask_token = cur.next()?;

    let hidden = n - k;
    let full = if hidden > 0 {
        let tokens = g.gather_rows(mask_token, &vec![0; batch * hidden])?;
        g.concat_rows(&[x, tokens])?
    } else {
        x
    };
    let order: Vec<usize> = masks
        .iter()
        .enumerate()
        .flat_map(|(b, m)| {
            m.restore.iter().map(move |&slot| {
                if slot < k {
                    b * k + slot
                } else {
                    batch * k + b * hidden + (slot - k)
                }
            })
        })
        .collect();
    let x = g.gather_rows(full, &order)?;
    let x = decoder_trunk(g, arch, x, &mut cur, batch)?;
    heads(g, arch, x, &mut cur)
}

/// Plain vision-transformer autoencoder over all `N` tokens of every crop,
/// without any masking machinery.
pub fn reference_graph<T: Scalar>(
    g: &mut Graph<T>,
    arch: &ArchConfig,
    vars: &[Var],
    tokens: &Tensor<T>,
    batch: usize,
) -> Result<Vec<Var>> {
    let n = arch.num_patches();
    let e = arch.encoder;
    let mut cur = Cursor { vars, pos: 0 };
    let pos = sincos_pos_embed::<T>(arch.grid_side(), e.dim);
    let pos = g.constant(tile_rows(&pos, (0..batch * n).map(|i| i % n))?);
    let x = g.constant(tokens.clone());
    let x = linear(g, x, &mut cur)?;
    let mut x = g.add(x, pos)?;
    for _ in 0..e.depth {
        x = block(g, x, &mut cur, batch, e.heads)?;
    }
    let x = norm(g, x, &mut cur)?;
    let x = linear(g, x, &mut cur)?;
    cur.next()?; // mask token, unused without masking
    let x = decoder_trunk(g, arch, x, &mut cur, batch)?;
    heads(g, arch, x, &mut cur)
}

/// Which patches contribute to the reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossPolicy {
    AllPatches,
    MaskedOnly,
}

impl LossPolicy {
    /// All patches without masking, hidden patches only otherwise.
    pub fn default_for(mask_ratio: f64) -> Self {
        if mask_ratio > 0.0 {
            LossPolicy::MaskedOnly
        } else {
            LossPolicy::AllPatches
        }
    }
}

/// Mean over selected patches of the per-patch mean squared error between a
/// prediction `[B·N × p²]` and a constant target of the same shape.
pub fn loss_per_patch<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    masks: &[MaskSpec],
    policy: LossPolicy,
) -> Result<Var> {
    let rows: Vec<bool> = masks
        .iter()
        .flat_map(|m| {
            m.mask
                .iter()
                .map(move |&hidden| policy == LossPolicy::AllPatches || hidden)
        })
        .collect();
    g.row_mse(pred, target, &rows)
}
