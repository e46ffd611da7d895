//! 3×3×3 convolutions with zero padding and the three-scale pyramid built
//! from them.
//!
//! A stride-2 layer places output voxel `o` over input voxel `2o`, so a
//! continuous coordinate `q` at full resolution is `q / 2^s` at scale `s`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::volume::{Affine, Grid, Volume};

/// Kernel taps in z-major raster order (`dz` outermost, `dx` innermost).
pub const TAPS: usize = 27;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    /// Laid out `[tap][in][out]`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv3d {
    pub fn zeros(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        Conv3d {
            in_ch,
            out_ch,
            stride,
            weight: vec![0.0; TAPS * in_ch * out_ch],
            bias: vec![0.0; out_ch],
        }
    }

    /// He-uniform weights, zero biases.
    pub fn random<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let mut c = Self::zeros(in_ch, out_ch, stride);
        let bound = (6.0 / (TAPS * in_ch) as f64).sqrt();
        for w in &mut c.weight {
            *w = rng.gen_range(-bound..bound) as f32;
        }
        c
    }

    pub fn w_index(&self, tap: usize, i: usize, o: usize) -> usize {
        (tap * self.in_ch + i) * self.out_ch + o
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 || !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Shape(format!(
                "conv layer needs positive channels and stride 1 or 2 (got {}->{} stride {})",
                self.in_ch, self.out_ch, self.stride
            )));
        }
        if self.weight.len() != TAPS * self.in_ch * self.out_ch || self.bias.len() != self.out_ch {
            return Err(Error::Shape(
                "conv weight/bias length does not match channels".into(),
            ));
        }
        Ok(())
    }

    /// Convolve `input`, optionally applying a ReLU.
    pub fn forward(&self, input: &Volume, relu: bool) -> Result<Volume> {
        self.validate()?;
        if input.channels() != self.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_ch,
                input.channels()
            )));
        }
        let din = input.dims();
        let s = self.stride;
        let dout = din.map(|d| (d - 1) / s + 1);
        let grid = scaled_grid(input.grid(), dout, s as f64)?;
        let (ci, co) = (self.in_ch, self.out_ch);
        let w: Vec<f64> = self.weight.iter().map(|&v| v as f64).collect();
        let src = input.data();
        let plane = dout[0] * dout[1] * co;
        let mut data = vec![0.0; dout[2] * plane];
        data.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(oz, out)| {
                let mut acc = vec![0.0f64; co];
                for oy in 0..dout[1] {
                    for ox in 0..dout[0] {
                        acc.iter_mut()
                            .zip(&self.bias)
                            .for_each(|(a, b)| *a = *b as f64);
                        let centre = [ox * s, oy * s, oz * s];
                        let mut tap = 0;
                        for dz in -1i64..=1 {
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let x = centre[0] as i64 + dx;
                                    let y = centre[1] as i64 + dy;
                                    let z = centre[2] as i64 + dz;
                                    let inside = x >= 0
                                        && y >= 0
                                        && z >= 0
                                        && (x as usize) < din[0]
                                        && (y as usize) < din[1]
                                        && (z as usize) < din[2];
                                    if inside {
                                        let vi = x as usize
                                            + din[0] * (y as usize + din[1] * z as usize);
                                        let xin = &src[vi * ci..(vi + 1) * ci];
                                        let wt = &w[tap * ci * co..(tap + 1) * ci * co];
                                        for (i, &xv) in xin.iter().enumerate() {
                                            if xv == 0.0 {
                                                continue;
                                            }
                                            for (a, wv) in
                                                acc.iter_mut().zip(&wt[i * co..(i + 1) * co])
                                            {
                                                *a += xv * wv;
                                            }
                                        }
                                    }
                                    tap += 1;
                                }
                            }
                        }
                        let o = (ox + dout[0] * oy) * co;
                        for (dst, &a) in out[o..o + co].iter_mut().zip(&acc) {
                            *dst = if relu { a.max(0.0) } else { a };
                        }
                    }
                }
            });
        Volume::new(grid, co, data)
    }
}

/// Grid whose voxel `o` sits at voxel `factor·o` of `g`.
pub fn scaled_grid(g: &Grid, dims: [usize; 3], factor: f64) -> Result<Grid> {
    let mut rows = *g.affine.rows();
    for r in &mut rows {
        for c in r.iter_mut().take(3) {
            *c *= factor;
        }
    }
    Grid::new(dims, g.spacing.map(|s| s * factor), Affine::new(rows)?)
}

/// Zero-pad the high end of each axis up to a multiple of `m`.
pub fn pad_to_multiple(v: &Volume, m: usize) -> Volume {
    let d = v.dims();
    let nd = d.map(|x| x.div_ceil(m) * m);
    if nd == d {
        return v.clone();
    }
    log::warn!(
        "grid {:?} is not divisible by {m}; zero-padding to {:?}",
        d,
        nd
    );
    let c = v.channels();
    let mut data = vec![0.0; nd[0] * nd[1] * nd[2] * c];
    for z in 0..d[2] {
        for y in 0..d[1] {
            let src = &v.data()[(d[0] * (y + d[1] * z)) * c..(d[0] * (y + d[1] * z) + d[0]) * c];
            let o = (nd[0] * (y + nd[1] * z)) * c;
            data[o..o + src.len()].copy_from_slice(src);
        }
    }
    let grid =
        Grid::new(nd, v.grid().spacing, v.grid().affine).expect("padding keeps a valid grid");
    Volume::new(grid, c, data).expect("sizes match by construction")
}

/// Full, half and quarter resolution feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Scales {
    pub f: [Volume; 3],
}

impl Scales {
    pub fn channels(&self) -> [usize; 3] {
        [
            self.f[0].channels(),
            self.f[1].channels(),
            self.f[2].channels(),
        ]
    }
}

/// Stride-1 layer followed by two stride-2 layers, ReLU after each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvPyramid {
    pub layers: [Conv3d; 3],
}

impl ConvPyramid {
    pub fn zeros(in_ch: usize, ch: [usize; 3]) -> Self {
        ConvPyramid {
            layers: [
                Conv3d::zeros(in_ch, ch[0], 1),
                Conv3d::zeros(ch[0], ch[1], 2),
                Conv3d::zeros(ch[1], ch[2], 2),
            ],
        }
    }

    /// Random initialisation from the `(seed, Init, [tag, layer])` streams.
    pub fn random(in_ch: usize, ch: [usize; 3], seed: u64, tag: u64) -> Self {
        let r = |l: u64| rng::stream(seed, Domain::Init, &[tag, l]);
        ConvPyramid {
            layers: [
                Conv3d::random(in_ch, ch[0], 1, &mut r(0)),
                Conv3d::random(ch[0], ch[1], 2, &mut r(1)),
                Conv3d::random(ch[1], ch[2], 2, &mut r(2)),
            ],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_ch
    }

    pub fn out_channels(&self) -> [usize; 3] {
        [
            self.layers[0].out_ch,
            self.layers[1].out_ch,
            self.layers[2].out_ch,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            l.validate()?;
        }
        let [a, b, c] = &self.layers;
        if a.stride != 1
            || b.stride != 2
            || c.stride != 2
            || a.out_ch != b.in_ch
            || b.out_ch != c.in_ch
        {
            return Err(Error::Shape(
                "pyramid layers must chain 1/2/2 strides with matching channels".into(),
            ));
        }
        Ok(())
    }

    pub fn encode(&self, input: &Volume) -> Result<Scales> {
        self.validate()?;
        let x = pad_to_multiple(input, 4);
        let f1 = self.layers[0].forward(&x, true)?;
        let f2 = self.layers[1].forward(&f1, true)?;
        let f3 = self.layers[2].forward(&f2, true)?;
        Ok(Scales { f: [f1, f2, f3] })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vol(dims: [usize; 3], ch: usize, f: impl Fn(usize) -> f64) -> Volume {
        let g = Grid::axis_aligned(dims, [1.0; 3], [0.0; 3]).unwrap();
        let n = g.n_voxels() * ch;
        Volume::new(g, ch, (0..n).map(f).collect()).unwrap()
    }

    /// Direct evaluation of one output value from the definition.
    fn conv_oracle(c: &Conv3d, v: &Volume, o: [usize; 3], oc: usize) -> f64 {
        let d = v.dims();
        let mut s = c.bias[oc] as f64;
        let mut tap = 0;
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let p = [
                        o[0] as i64 * c.stride as i64 + dx,
                        o[1] as i64 * c.stride as i64 + dy,
                        o[2] as i64 * c.stride as i64 + dz,
                    ];
                    if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < d[a]) {
                        let x = v.at(p[0] as usize, p[1] as usize, p[2] as usize);
                        for (i, xi) in x.iter().enumerate().take(c.in_ch) {
                            s += xi * c.weight[c.w_index(tap, i, oc)] as f64;
                        }
                    }
                    tap += 1;
                }
            }
        }
        s
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_maps() {
        let p = ConvPyramid::random(3, [4, 5, 6], 1, 0);
        let s = p.encode(&vol([8, 8, 8], 3, |_| 0.0)).unwrap();
        assert!(s.f.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn output_dims_halve_per_scale() {
        let p = ConvPyramid::random(2, [3, 3, 3], 1, 0);
        let s = p.encode(&vol([16, 12, 8], 2, |i| (i % 7) as f64)).unwrap();
        assert_eq!(s.f[0].dims(), [16, 12, 8]);
        assert_eq!(s.f[1].dims(), [8, 6, 4]);
        assert_eq!(s.f[2].dims(), [4, 3, 2]);
        assert_eq!(s.channels(), [3, 3, 3]);
    }

    #[test]
    fn non_multiple_dims_are_padded() {
        let p = ConvPyramid::random(1, [2, 2, 2], 1, 0);
        let s = p.encode(&vol([10, 9, 8], 1, |i| i as f64)).unwrap();
        assert_eq!(s.f[0].dims(), [12, 12, 8]);
        assert_eq!(s.f[2].dims(), [3, 3, 2]);
    }

    #[test]
    fn identity_kernel_reproduces_channel() {
        let mut c = Conv3d::zeros(2, 1, 1);
        let k = c.w_index(13, 1, 0);
        c.weight[k] = 1.0;
        let v = vol([5, 4, 3], 2, |i| (i as f64 * 0.37).sin().abs());
        let out = c.forward(&v, true).unwrap();
        for idx in 0..v.grid().n_voxels() {
            assert_eq!(out.voxel(idx)[0], v.voxel(idx)[1]);
        }
    }

    #[test]
    fn matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let mut c = Conv3d::random(3, 4, stride, &mut rng);
            c.bias
                .iter_mut()
                .for_each(|b| *b = rng.gen_range(-0.5..0.5));
            let v = vol([6, 5, 7], 3, |i| ((i * 31 % 17) as f64 - 8.0) / 3.0);
            let out = c.forward(&v, false).unwrap();
            let d = out.dims();
            for z in 0..d[2] {
                for y in 0..d[1] {
                    for x in 0..d[0] {
                        for oc in 0..4 {
                            let want = conv_oracle(&c, &v, [x, y, z], oc);
                            assert!((out.at(x, y, z)[oc] - want).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn stride_two_grid_maps_to_even_voxels() {
        let g = Grid::axis_aligned([8, 8, 8], [1.5; 3], [2.0, 3.0, 4.0]).unwrap();
        let h = scaled_grid(&g, [4, 4, 4], 2.0).unwrap();
        assert_eq!(
            h.voxel_to_world([1.0, 2.0, 3.0]),
            g.voxel_to_world([2.0, 4.0, 6.0])
        );
    }

    #[test]
    fn uniform_input_gives_constant_interior() {
        let p = ConvPyramid::random(5, [3, 3, 3], 9, 1);
        let s = p
            .encode(&vol([16, 16, 16], 5, |i| f64::from(i % 5 == 2)))
            .unwrap();
        let f = &s.f[0];
        let c = f.at(8, 8, 8).to_vec();
        for (x, y, z) in [(1, 1, 1), (5, 9, 14), (14, 14, 14)] {
            assert_eq!(f.at(x, y, z), c.as_slice());
        }
    }
}
