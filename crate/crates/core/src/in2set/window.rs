use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    /// Contiguous `M x M` windows: `B = HW/M^2` groups of `N = M^2` tokens.
    Local,
    /// Dilated grid: group `(iy, ix)` collects every pixel congruent to it
    /// modulo `M`, giving `B = M^2` groups of `N = HW/M^2` tokens.
    Grid,
}

/// Token grouping of an `H x W` map. `pixels[b * N + n]` is the row-major
/// pixel index of token `n` in group `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowLayout {
    pub mode: WindowMode,
    pub window: usize,
    pub groups: usize,
    pub tokens: usize,
    height: usize,
    width: usize,
    pixels: Arc<[usize]>,
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, window: usize, mode: WindowMode) -> Result<Self> {
        if window == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
            return Err(dim_err(format!(
                "{height}x{width} map is not divisible into {window}x{window} windows"
            )));
        }
        let (gh, gw) = (height / window, width / window);
        let m = window;
        let mut pixels = Vec::with_capacity(height * width);
        let (groups, tokens) = match mode {
            WindowMode::Local => {
                for wy in 0..gh {
                    for wx in 0..gw {
                        for iy in 0..m {
                            for ix in 0..m {
                                pixels.push((wy * m + iy) * width + wx * m + ix);
                            }
                        }
                    }
                }
                (gh * gw, m * m)
            }
            WindowMode::Grid => {
                for iy in 0..m {
                    for ix in 0..m {
                        for gy in 0..gh {
                            for gx in 0..gw {
                                pixels.push((gy * m + iy) * width + gx * m + ix);
                            }
                        }
                    }
                }
                (m * m, gh * gw)
            }
        };
        Ok(Self {
            mode,
            window,
            groups,
            tokens,
            height,
            width,
            pixels: pixels.into(),
        })
    }

    pub fn map_shape(&self, depth: usize) -> [usize; 3] {
        [self.height, self.width, depth]
    }

    pub fn token_shape(&self, depth: usize) -> [usize; 3] {
        [self.groups, self.tokens, depth]
    }

    /// Element gather index taking an `[H,W,depth]` map to `[B,N,depth]`.
    pub fn partition_index(&self, depth: usize) -> Arc<[usize]> {
        self.pixels
            .iter()
            .flat_map(|&p| (0..depth).map(move |c| p * depth + c))
            .collect()
    }

    /// Element gather index taking `[B,N,depth]` tokens back to the map.
    pub fn unpartition_index(&self, depth: usize) -> Arc<[usize]> {
        let mut inv = vec![0; self.pixels.len() * depth];
        for (t, &p) in self.pixels.iter().enumerate() {
            for c in 0..depth {
                inv[p * depth + c] = t * depth + c;
            }
        }
        inv.into()
    }

    fn check(&self, shape: &[usize], tokens: bool) -> Result<usize> {
        let depth = *shape.last().unwrap_or(&0);
        let want = if tokens {
            self.token_shape(depth).to_vec()
        } else {
            self.map_shape(depth).to_vec()
        };
        if shape != want {
            return Err(dim_err(format!("window layout expects {want:?}, got {shape:?}")));
        }
        Ok(depth)
    }

    pub fn partition(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let d = self.check(tape.shape(x), false)?;
        tape.gather(x, self.partition_index(d), &self.token_shape(d))
    }

    pub fn unpartition(&self, tape: &mut Tape, t: Var) -> Result<Var> {
        let d = self.check(tape.shape(t), true)?;
        tape.gather(t, self.unpartition_index(d), &self.map_shape(d))
    }

    /// Value-level partition for callers without a tape.
    pub fn partition_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.check(x.shape(), false)?;
        let idx = self.partition_index(d);
        Tensor::new(&self.token_shape(d), idx.iter().map(|&i| x.data()[i]).collect())
    }

    pub fn unpartition_tensor(&self, t: &Tensor) -> Result<Tensor> {
        let d = self.check(t.shape(), true)?;
        let idx = self.unpartition_index(d);
        Tensor::new(&self.map_shape(d), idx.iter().map(|&i| t.data()[i]).collect())
    }
}
