use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Label-preserving geometric variants of a `[f, h, w]` volume. Rotations,
/// flips and the transpose act on the in-plane `(h, w)` axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Augmentation {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    Transpose,
    ReverseSlices,
}

impl Augmentation {
    pub const ALL: [Augmentation; 8] = [
        Augmentation::Identity,
        Augmentation::Rot90,
        Augmentation::Rot180,
        Augmentation::Rot270,
        Augmentation::FlipH,
        Augmentation::FlipV,
        Augmentation::Transpose,
        Augmentation::ReverseSlices,
    ];

    pub fn id(self) -> u8 {
        Self::ALL.iter().position(|&a| a == self).expect("listed") as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown augmentation id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Augmentation::Identity => "identity",
            Augmentation::Rot90 => "rot90",
            Augmentation::Rot180 => "rot180",
            Augmentation::Rot270 => "rot270",
            Augmentation::FlipH => "flip_h",
            Augmentation::FlipV => "flip_v",
            Augmentation::Transpose => "transpose_hw",
            Augmentation::ReverseSlices => "reverse_slices",
        }
    }

    pub fn inverse(self) -> Self {
        match self {
            Augmentation::Rot90 => Augmentation::Rot270,
            Augmentation::Rot270 => Augmentation::Rot90,
            other => other,
        }
    }

    /// Source `(slice, row, col)` read by output position `(z, y, x)`.
    fn source(self, z: usize, y: usize, x: usize, f: usize, n: usize) -> (usize, usize, usize) {
        let last = n - 1;
        match self {
            Augmentation::Identity => (z, y, x),
            Augmentation::Rot90 => (z, x, last - y),
            Augmentation::Rot180 => (z, last - y, last - x),
            Augmentation::Rot270 => (z, last - x, y),
            Augmentation::FlipH => (z, y, last - x),
            Augmentation::FlipV => (z, last - y, x),
            Augmentation::Transpose => (z, x, y),
            Augmentation::ReverseSlices => (f - 1 - z, y, x),
        }
    }

    pub fn apply<T: Float>(self, volume: &Tensor<T>) -> Result<Tensor<T>> {
        let s = volume.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Input(format!(
                "augmentation needs a [f, n, n] volume with square slices, got {s:?}"
            )));
        }
        let (f, n) = (s[0], s[1]);
        let v = volume.data();
        let mut out = Vec::with_capacity(v.len());
        for z in 0..f {
            for y in 0..n {
                for x in 0..n {
                    let (sz, sy, sx) = self.source(z, y, x, f, n);
                    out.push(v[(sz * n + sy) * n + sx]);
                }
            }
        }
        Tensor::new(s.to_vec(), out)
    }
}

/// The eight variants of `volume`, in [`Augmentation::ALL`] order.
pub fn augment<T: Float>(volume: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    Augmentation::ALL.iter().map(|a| a.apply(volume)).collect()
}
