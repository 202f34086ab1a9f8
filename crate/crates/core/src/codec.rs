//! Frozen image codecs between pixel space and the latent space of the flow.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    #[default]
    Identity,
    /// 2x average-pool encode, bilinear decode.
    Downsample,
}

fn check(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::Invalid {
            op,
            msg: format!("expected [C, H, W], got {:?}", x.shape()),
        }),
    }
}

impl Codec {
    pub fn latent_shape(&self, image: &[usize]) -> Vec<usize> {
        match self {
            Codec::Identity => image.to_vec(),
            Codec::Downsample => vec![image[0], image[1] / 2, image[2] / 2],
        }
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        match self {
            Codec::Identity => Ok(image.clone()),
            Codec::Downsample => {
                let (c, h, w) = check(image, "encode")?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(TensorError::Invalid {
                        op: "encode",
                        msg: format!("odd spatial extent {h}x{w}"),
                    });
                }
                let (oh, ow) = (h / 2, w / 2);
                let d = image.data();
                let mut out = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    for r in 0..oh {
                        for col in 0..ow {
                            let at = |i: usize, j: usize| d[ch * h * w + (2 * r + i) * w + 2 * col + j];
                            out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * 0.25);
                        }
                    }
                }
                Tensor::new([c, oh, ow], out)
            }
        }
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        match self {
            Codec::Identity => Ok(latent.clone()),
            Codec::Downsample => {
                let (c, h, w) = check(latent, "decode")?;
                let (oh, ow) = (2 * h, 2 * w);
                let d = latent.data();
                // Output pixel centre (i + 0.5) / 2 - 0.5 in latent coordinates, clamped.
                let coord = |i: usize, n: usize| {
                    let p = ((i as f32 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f32);
                    let lo = p.floor() as usize;
                    (lo, (lo + 1).min(n - 1), p - lo as f32)
                };
                let mut out = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    let plane = &d[ch * h * w..(ch + 1) * h * w];
                    for r in 0..oh {
                        let (r0, r1, fr) = coord(r, h);
                        for col in 0..ow {
                            let (c0, c1, fc) = coord(col, w);
                            let lerp = |a: f32, b: f32, f: f32| a + (b - a) * f;
                            let top = lerp(plane[r0 * w + c0], plane[r0 * w + c1], fc);
                            let bot = lerp(plane[r1 * w + c0], plane[r1 * w + c1], fc);
                            out.push(lerp(top, bot, fr));
                        }
                    }
                }
                Tensor::new([c, oh, ow], out)
            }
        }
    }
}
