use crate::{AutodiffError, NodeId, Result, Tape, Tensor};

/// Moves a trailing channel axis in front of the two spatial axes:
/// `[.., H, W, C] -> [.., C, H, W]` when `to_front`, and back otherwise.
fn permute(data: &[f64], outer: usize, h: usize, w: usize, c: usize, to_front: bool) -> Vec<f64> {
    let plane = h * w;
    let block = plane * c;
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        let src = &data[o * block..(o + 1) * block];
        let dst = &mut out[o * block..(o + 1) * block];
        for p in 0..plane {
            for ch in 0..c {
                if to_front {
                    dst[ch * plane + p] = src[p * c + ch];
                } else {
                    dst[p * c + ch] = src[ch * plane + p];
                }
            }
        }
    }
    out
}

fn split_spatial(op: &'static str, shape: &[usize]) -> Result<(usize, [usize; 3])> {
    if shape.len() < 3 {
        return Err(AutodiffError::RankMismatch {
            op,
            expected: ">= 3".into(),
            actual: shape.to_vec(),
        });
    }
    let (lead, tail) = shape.split_at(shape.len() - 3);
    Ok((lead.iter().product(), [tail[0], tail[1], tail[2]]))
}

impl Tape {
    /// `[.., H, W, C] -> [.., C, H, W]`.
    pub fn channels_first(&self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let input = self.value(a);
        let (outer, [h, w, c]) = split_spatial("channels_first", input.shape())?;
        let mut shape = input.shape()[..input.rank() - 3].to_vec();
        shape.extend([c, h, w]);
        let value = Tensor::new(shape, permute(input.data(), outer, h, w, c, true))?;
        self.custom(
            "channels_first",
            &[a],
            value,
            Box::new(move |g, _| vec![Some(permute(g, outer, h, w, c, false))]),
        )
    }

    /// `[.., C, H, W] -> [.., H, W, C]`.
    pub fn channels_last(&self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let input = self.value(a);
        let (outer, [c, h, w]) = split_spatial("channels_last", input.shape())?;
        let mut shape = input.shape()[..input.rank() - 3].to_vec();
        shape.extend([h, w, c]);
        let value = Tensor::new(shape, permute(input.data(), outer, h, w, c, false))?;
        self.custom(
            "channels_last",
            &[a],
            value,
            Box::new(move |g, _| vec![Some(permute(g, outer, h, w, c, true))]),
        )
    }
}
