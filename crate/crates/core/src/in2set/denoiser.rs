use super::flops::{skeleton_flops, FlopBreakdown};
use super::{ArchConfig, GuidedPyramid, In2Ab, WindowMode, LEVELS};
use crate::error::{dim_err, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// U-shaped stack of five In2AB blocks with a global residual connection.
///
/// ```text
/// [x, sigma] -> conv3 -> enc0 -> down -> enc1 -> down -> bottleneck
///                          |              |                  |
///                        dec0 <- fuse <- dec1 <- fuse <- up -+
///                          |
///                        conv3 -> + x
/// ```
#[derive(Clone, Debug)]
pub struct Denoiser {
    arch: ArchConfig,
    input: ParamId,
    output: ParamId,
    down: [ParamId; LEVELS - 1],
    up: [ParamId; LEVELS - 1],
    fuse: [ParamId; LEVELS - 1],
    encoders: [In2Ab; LEVELS - 1],
    bottleneck: In2Ab,
    decoders: [In2Ab; LEVELS - 1],
}

fn mode(level: usize) -> WindowMode {
    if level == 0 {
        WindowMode::Local
    } else {
        WindowMode::Grid
    }
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let c = arch.bands;
        let fw = |l| arch.feature_width(l);
        let input = store.add(format!("{prefix}.in.kernel"), init.conv(3, c + 1, fw(0)));
        let mut encoders = Vec::new();
        let mut down = Vec::new();
        for l in 0..LEVELS - 1 {
            encoders.push(In2Ab::new(store, init, &format!("{prefix}.enc{l}"), arch, l, mode(l))?);
            down.push(store.add(format!("{prefix}.down{l}.kernel"), init.conv(3, fw(l), fw(l + 1))));
        }
        let bottleneck = In2Ab::new(
            store,
            init,
            &format!("{prefix}.mid"),
            arch,
            LEVELS - 1,
            WindowMode::Grid,
        )?;
        let mut decoders = Vec::new();
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        for l in (0..LEVELS - 1).rev() {
            up.push(store.add(format!("{prefix}.up{l}.kernel"), init.conv(2, fw(l + 1), fw(l))));
            let std = 1.0 / ((2 * fw(l)) as f64).sqrt();
            fuse.push(store.add(format!("{prefix}.fuse{l}"), init.trunc_normal(&[2 * fw(l), fw(l)], std)));
            decoders.push(In2Ab::new(store, init, &format!("{prefix}.dec{l}"), arch, l, mode(l))?);
        }
        // stored level-ascending
        up.reverse();
        fuse.reverse();
        decoders.reverse();
        let output = store.add(format!("{prefix}.out.kernel"), Tensor::zeros(&[3, 3, fw(0), c]));
        Ok(Self {
            arch: arch.clone(),
            input,
            output,
            down: down.try_into().expect("levels"),
            up: up.try_into().expect("levels"),
            fuse: fuse.try_into().expect("levels"),
            encoders: encoders.try_into().expect("levels"),
            bottleneck,
            decoders: decoders.try_into().expect("levels"),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn blocks(&self) -> impl Iterator<Item = &In2Ab> {
        self.encoders
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.decoders.iter().rev())
    }

    pub fn output_kernel(&self) -> ParamId {
        self.output
    }

    /// `x` is an `[H, W, C]` cube, `sigma` a one-element noise level.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, sigma: Var, guide: &GuidedPyramid) -> Result<Var> {
        let a = &self.arch;
        if tape.shape(x) != [a.height, a.width, a.bands] {
            return Err(dim_err(format!(
                "denoiser configured for [{}, {}, {}], got {:?}",
                a.height,
                a.width,
                a.bands,
                tape.shape(x)
            )));
        }
        let ones = tape.constant(Tensor::ones(&[a.height, a.width, 1]));
        let s = tape.scale_by(ones, sigma)?;
        let xin = tape.concat_lastdim(x, s)?;
        let mut f = tape.conv2d(xin, p[self.input], 1, 1)?;

        let mut skips = Vec::with_capacity(LEVELS - 1);
        for l in 0..LEVELS - 1 {
            let e = self.encoders[l].forward(tape, p, f, guide.levels[l])?;
            skips.push(e);
            f = tape.conv2d(e, p[self.down[l]], 2, 1)?;
        }
        f = self.bottleneck.forward(tape, p, f, guide.levels[LEVELS - 1])?;
        for l in (0..LEVELS - 1).rev() {
            let u = tape.conv_transpose2d(f, p[self.up[l]], 2)?;
            let cat = tape.concat_lastdim(u, skips[l])?;
            let fused = tape.linear(cat, p[self.fuse[l]])?;
            f = self.decoders[l].forward(tape, p, fused, guide.levels[l])?;
        }
        let r = tape.conv2d(f, p[self.output], 1, 1)?;
        tape.add(x, r)
    }

    pub fn flops(&self) -> FlopBreakdown {
        self.blocks().fold(skeleton_flops(&self.arch), |acc, b| acc + b.flops())
    }
}
