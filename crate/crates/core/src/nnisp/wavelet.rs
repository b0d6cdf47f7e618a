//! Orthonormal single-level 2D Haar transform on NCHW tensors.
//!
//! `dwt` maps `[B, C, H, W]` to `[B, 4C, H/2, W/2]` with the bands grouped
//! as `[LL, LH, HL, HH]`, each a block of `C` channels. For a 2x2 tile
//! `a b / c d`: `LL = (a+b+c+d)/2`, `LH = (a-b+c-d)/2`, `HL = (a+b-c-d)/2`,
//! `HH = (a-b-c+d)/2`. The analysis matrix is symmetric and orthogonal, so
//! synthesis applies the same butterflies in reverse.

use metaisp_autograd::{CustomOp, Graph, Real, Tensor, Var};

use crate::error::{invalid, Result};

fn butterfly<T: Real>(a: T, b: T, c: T, d: T) -> [T; 4] {
    let h = T::lit(0.5);
    [(a + b + c + d) * h, (a - b + c - d) * h, (a + b - c - d) * h, (a - b - c + d) * h]
}

pub fn dwt_tensor<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(invalid!("haar analysis needs NCHW with even spatial dims, got {:?}", s));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let d = x.data();
    let mut out = vec![T::zero(); x.numel()];
    let plane = ho * wo;
    for n in 0..b {
        for ch in 0..c {
            let src = &d[(n * c + ch) * h * w..][..h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let r0 = 2 * i * w + 2 * j;
                    let bands = butterfly(src[r0], src[r0 + 1], src[r0 + w], src[r0 + w + 1]);
                    for (k, v) in bands.into_iter().enumerate() {
                        out[((n * 4 + k) * c + ch) * plane + i * wo + j] = v;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[b, 4 * c, ho, wo], out)?)
}

pub fn idwt_tensor<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] % 4 != 0 {
        return Err(invalid!("haar synthesis needs NCHW with channels divisible by 4, got {:?}", s));
    }
    let (b, c4, hi, wi) = (s[0], s[1], s[2], s[3]);
    let c = c4 / 4;
    let (h, w) = (2 * hi, 2 * wi);
    let d = x.data();
    let plane = hi * wi;
    let mut out = vec![T::zero(); x.numel()];
    for n in 0..b {
        for ch in 0..c {
            let dst = &mut out[(n * c + ch) * h * w..][..h * w];
            for i in 0..hi {
                for j in 0..wi {
                    let band = |k: usize| d[((n * 4 + k) * c + ch) * plane + i * wi + j];
                    let [a, bb, cc, dd] = butterfly(band(0), band(1), band(2), band(3));
                    let r0 = 2 * i * w + 2 * j;
                    dst[r0] = a;
                    dst[r0 + 1] = bb;
                    dst[r0 + w] = cc;
                    dst[r0 + w + 1] = dd;
                }
            }
        }
    }
    Ok(Tensor::new(&[b, c, h, w], out)?)
}

struct Dwt;
struct Idwt;

// The transforms are orthogonal, so each one's adjoint is the other.
impl<T: Real> CustomOp<T> for Dwt {
    fn name(&self) -> &'static str {
        "dwt_haar"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(idwt_tensor(grad).expect("gradient has the output shape"))]
    }
}

impl<T: Real> CustomOp<T> for Idwt {
    fn name(&self) -> &'static str {
        "idwt_haar"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(dwt_tensor(grad).expect("gradient has the output shape"))]
    }
}

pub fn dwt_haar<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let out = dwt_tensor(g.value(x))?;
    Ok(g.custom(&[x], out, Box::new(Dwt)))
}

pub fn idwt_haar<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let out = idwt_tensor(g.value(x))?;
    Ok(g.custom(&[x], out, Box::new(Idwt)))
}
