//! Patch-token self-attention encoder (forward pass only).
//!
//! The input is cut into non-overlapping cubes of edge `p`; each cube is
//! flattened and projected to a token, a sinusoidal code of the token's
//! raster index is added, and the tokens pass through `blocks × units`
//! post-norm transformer units. A decoder of non-overlapping transposed
//! convolutions brings the token grid back to quarter, half and full
//! resolution, each level summed with a strided 1×1 projection of the input
//! (the skip path) before a ReLU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{pad_to_multiple, scaled_grid, Scales};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `[out][in]`.
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

impl Linear {
    fn random<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = (3.0 / n_in as f64).sqrt();
        let w = (0..n_in * n_out)
            .map(|_| rng.gen_range(-bound..bound) as f32)
            .collect();
        Linear {
            n_in,
            n_out,
            w,
            b: vec![0.0; n_out],
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, dst) in out.iter_mut().enumerate() {
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            *dst = self.b[o] as f64 + row.iter().zip(x).map(|(w, v)| *w as f64 * v).sum::<f64>();
        }
    }

    fn check(&self) -> bool {
        self.w.len() == self.n_in * self.n_out && self.b.len() == self.n_out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerEncoder {
    pub in_ch: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub channels: [usize; 3],
    pub embed: Linear,
    pub units: Vec<Unit>,
    /// Transposed convolutions: token grid → quarter, quarter → half,
    /// half → full. Weight layout `[offset][out][in]` per layer.
    pub up: [Linear; 3],
    /// Per-level 1×1 projections of the input (quarter, half, full).
    pub skip: [Linear; 3],
}

/// Sinusoidal code of position `pos` with `width` entries.
pub fn positional_encoding(pos: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let a = pos as f64 * freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Row-softmax of scaled dot products between `q` and `k` (one row per query).
pub fn attention_weights(q: &[Vec<f64>], k: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let scale = 1.0 / (q.first().map_or(1, |r| r.len()) as f64).sqrt();
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn layer_norm(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

impl TransformerEncoder {
    pub fn random(
        in_ch: usize,
        patch: usize,
        width: usize,
        heads: usize,
        n_units: usize,
        channels: [usize; 3],
        seed: u64,
    ) -> Result<Self> {
        if patch < 4 || !patch.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "patch edge must be a positive multiple of 4, got {patch}"
            )));
        }
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "width {width} must be divisible by heads {heads}"
            )));
        }
        let mut r = rng::stream(seed, Domain::Init, &[100]);
        let unit = |r: &mut rng::Stream| Unit {
            q: Linear::random(width, width, r),
            k: Linear::random(width, width, r),
            v: Linear::random(width, width, r),
            o: Linear::random(width, width, r),
            mlp1: Linear::random(width, 2 * width, r),
            mlp2: Linear::random(2 * width, width, r),
        };
        let embed = Linear::random(patch * patch * patch * in_ch, width, &mut r);
        let units = (0..n_units).map(|_| unit(&mut r)).collect();
        let f = patch / 4;
        let up = [
            Linear::random(width, f * f * f * channels[2], &mut r),
            Linear::random(channels[2], 8 * channels[1], &mut r),
            Linear::random(channels[1], 8 * channels[0], &mut r),
        ];
        let skip = [
            Linear::random(in_ch, channels[2], &mut r),
            Linear::random(in_ch, channels[1], &mut r),
            Linear::random(in_ch, channels[0], &mut r),
        ];
        Ok(TransformerEncoder {
            in_ch,
            patch,
            width,
            heads,
            channels,
            embed,
            units,
            up,
            skip,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.patch / 4;
        let c = self.channels;
        let ok = self.patch >= 4
            && self.patch.is_multiple_of(4)
            && self.heads > 0
            && self.width.is_multiple_of(self.heads)
            && self.embed.check()
            && self.embed.n_in == self.patch.pow(3) * self.in_ch
            && self.embed.n_out == self.width
            && self.units.iter().all(|u| {
                [&u.q, &u.k, &u.v, &u.o, &u.mlp1, &u.mlp2]
                    .iter()
                    .all(|l| l.check())
                    && u.q.n_in == self.width
                    && u.mlp2.n_out == self.width
            })
            && self.up[0].check()
            && self.up[0].n_out == f * f * f * c[2]
            && self.up[1].n_out == 8 * c[1]
            && self.up[2].n_out == 8 * c[0]
            && self.skip.iter().all(|l| l.check() && l.n_in == self.in_ch);
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint(
                "transformer weights do not match their declared shapes".into(),
            ))
        }
    }

    /// Split the padded input into flattened patch vectors in raster order.
    pub fn tokenize(&self, x: &Volume) -> (Vec<Vec<f64>>, [usize; 3]) {
        let p = self.patch;
        let d = x.dims();
        let g = d.map(|v| v / p);
        let c = x.channels();
        let mut tokens = Vec::with_capacity(g[0] * g[1] * g[2]);
        for tz in 0..g[2] {
            for ty in 0..g[1] {
                for tx in 0..g[0] {
                    let mut flat = Vec::with_capacity(p * p * p * c);
                    for z in 0..p {
                        for y in 0..p {
                            for xx in 0..p {
                                flat.extend_from_slice(x.at(tx * p + xx, ty * p + y, tz * p + z));
                            }
                        }
                    }
                    tokens.push(flat);
                }
            }
        }
        (tokens, g)
    }

    /// Embed patches and add positional codes.
    pub fn embed_tokens(&self, patches: &[Vec<f64>]) -> Vec<Vec<f64>> {
        patches
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut t = vec![0.0; self.width];
                self.embed.apply(p, &mut t);
                t.iter_mut()
                    .zip(positional_encoding(i, self.width))
                    .for_each(|(a, b)| *a += b);
                t
            })
            .collect()
    }

    /// The attention stack. Permuting input rows permutes output rows.
    pub fn blocks(&self, mut x: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        let w = self.width;
        let hd = w / self.heads;
        let n = x.len();
        for u in &self.units {
            let proj = |l: &Linear, x: &[Vec<f64>]| -> Vec<Vec<f64>> {
                x.iter()
                    .map(|r| {
                        let mut o = vec![0.0; l.n_out];
                        l.apply(r, &mut o);
                        o
                    })
                    .collect()
            };
            let (q, k, v) = (proj(&u.q, &x), proj(&u.k, &x), proj(&u.v, &x));
            let mut mixed = vec![vec![0.0; w]; n];
            for h in 0..self.heads {
                let sl = |m: &[Vec<f64>]| {
                    m.iter()
                        .map(|r| r[h * hd..(h + 1) * hd].to_vec())
                        .collect::<Vec<_>>()
                };
                let a = attention_weights(&sl(&q), &sl(&k));
                for (i, row) in a.iter().enumerate() {
                    for (j, &aij) in row.iter().enumerate() {
                        for c in 0..hd {
                            mixed[i][h * hd + c] += aij * v[j][h * hd + c];
                        }
                    }
                }
            }
            let attn = proj(&u.o, &mixed);
            for (xi, ai) in x.iter_mut().zip(&attn) {
                xi.iter_mut().zip(ai).for_each(|(a, b)| *a += b);
                layer_norm(xi);
            }
            for xi in x.iter_mut() {
                let mut hdn = vec![0.0; u.mlp1.n_out];
                u.mlp1.apply(xi, &mut hdn);
                hdn.iter_mut().for_each(|v| *v = v.max(0.0));
                let mut o = vec![0.0; w];
                u.mlp2.apply(&hdn, &mut o);
                xi.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
                layer_norm(xi);
            }
        }
        x
    }

    /// Multi-scale maps with the same shapes as the convolutional path.
    pub fn encode(&self, input: &Volume) -> Result<Scales> {
        self.validate()?;
        if input.channels() != self.in_ch {
            return Err(Error::Shape(format!(
                "transformer expects {} channels, got {}",
                self.in_ch,
                input.channels()
            )));
        }
        let x = pad_to_multiple(input, self.patch);
        let (patches, tg) = self.tokenize(&x);
        let tokens = self.blocks(self.embed_tokens(&patches));
        let d = x.dims();
        let f = self.patch / 4;
        let q = tg.map(|t| t * f);
        let f3 = self.upsample(&self.up[0], f, tg, &tokens, q, &x, 4, &self.skip[0])?;
        let rows2: Vec<Vec<f64>> = (0..f3.grid().n_voxels())
            .map(|i| f3.voxel(i).to_vec())
            .collect();
        let f2 = self.upsample(
            &self.up[1],
            2,
            q,
            &rows2,
            q.map(|v| v * 2),
            &x,
            2,
            &self.skip[1],
        )?;
        let rows1: Vec<Vec<f64>> = (0..f2.grid().n_voxels())
            .map(|i| f2.voxel(i).to_vec())
            .collect();
        let f1 = self.upsample(
            &self.up[2],
            2,
            q.map(|v| v * 2),
            &rows1,
            d,
            &x,
            1,
            &self.skip[2],
        )?;
        Ok(Scales { f: [f1, f2, f3] })
    }

    /// Non-overlapping transposed convolution by `factor`, plus the skip
    /// projection of the input sampled every `stride` voxels, then ReLU.
    #[allow(clippy::too_many_arguments)]
    fn upsample(
        &self,
        up: &Linear,
        factor: usize,
        src_dims: [usize; 3],
        src: &[Vec<f64>],
        out_dims: [usize; 3],
        input: &Volume,
        stride: usize,
        skip: &Linear,
    ) -> Result<Volume> {
        let c = skip.n_out;
        let n = out_dims[0] * out_dims[1] * out_dims[2];
        let mut data = vec![0.0; n * c];
        let mut buf = vec![0.0; up.n_out];
        for sz in 0..src_dims[2] {
            for sy in 0..src_dims[1] {
                for sx in 0..src_dims[0] {
                    up.apply(&src[sx + src_dims[0] * (sy + src_dims[1] * sz)], &mut buf);
                    let mut off = 0;
                    for dz in 0..factor {
                        for dy in 0..factor {
                            for dx in 0..factor {
                                let (x, y, z) =
                                    (sx * factor + dx, sy * factor + dy, sz * factor + dz);
                                let o = (x + out_dims[0] * (y + out_dims[1] * z)) * c;
                                data[o..o + c].copy_from_slice(&buf[off * c..(off + 1) * c]);
                                off += 1;
                            }
                        }
                    }
                }
            }
        }
        let mut s = vec![0.0; c];
        for z in 0..out_dims[2] {
            for y in 0..out_dims[1] {
                for x in 0..out_dims[0] {
                    skip.apply(input.at(x * stride, y * stride, z * stride), &mut s);
                    let o = (x + out_dims[0] * (y + out_dims[1] * z)) * c;
                    for (dst, v) in data[o..o + c].iter_mut().zip(&s) {
                        *dst = (*dst + v).max(0.0);
                    }
                }
            }
        }
        let grid = scaled_grid(input.grid(), out_dims, stride as f64)?;
        Volume::new(grid, c, data)
    }

    pub fn token_count(&self, dims: [usize; 3]) -> usize {
        dims.iter().map(|d| d.div_ceil(self.patch)).product()
    }
}
