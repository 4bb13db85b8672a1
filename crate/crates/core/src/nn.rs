//! Layer building blocks recorded onto a [`Graph`].

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::Binder;
use crate::tensor::Tensor;

/// A forward pass in progress: the graph being recorded plus the parameter
/// binding for it.
pub struct Fwd<'a, 'p> {
    pub g: &'a mut Graph,
    pub p: &'a mut Binder<'p>,
}

impl<'a, 'p> Fwd<'a, 'p> {
    pub fn new(g: &'a mut Graph, p: &'a mut Binder<'p>) -> Self {
        Self { g, p }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.p.get(self.g, name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.p.store().contains(name)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// `name.w` / optional `name.b` convolution.
    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let bname = format!("{name}.b");
        let b = if self.has(&bname) {
            Some(self.param(&bname)?)
        } else {
            None
        };
        self.g.conv2d(x, w, b, stride, pad)
    }

    /// `x · name.w + name.b` on a 2-D input.
    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add_row(y, b)
    }

    /// Group normalization followed by the per-channel affine `name.g`, `name.b`.
    pub fn group_norm(&mut self, name: &str, x: Var, groups: usize) -> Result<Var> {
        let y = self.g.group_norm(x, groups, crate::EPS_STD)?;
        let gamma = self.param(&format!("{name}.g"))?;
        let beta = self.param(&format!("{name}.b"))?;
        let y = self.g.mul_channel(y, gamma)?;
        self.g.add_channel(y, beta)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.g.silu(x)
    }

    /// Residual block with a per-channel timestep bias.
    ///
    /// `temb` is the already-activated 1×D timestep embedding.
    pub fn res_block(&mut self, name: &str, x: Var, temb: Var, groups: usize) -> Result<Var> {
        let h = self.group_norm(&format!("{name}.n1"), x, groups)?;
        let h = self.silu(h);
        let h = self.conv(&format!("{name}.c1"), h, 1, 1)?;
        let c_out = self.g.shape(h)[0];
        let t = self.linear(&format!("{name}.t"), temb)?;
        let t = self.g.reshape(t, &[c_out])?;
        let h = self.g.add_channel(h, t)?;
        let h = self.group_norm(&format!("{name}.n2"), h, groups)?;
        let h = self.silu(h);
        let h = self.conv(&format!("{name}.c2"), h, 1, 1)?;
        let skip_name = format!("{name}.skip");
        let skip = if self.has(&format!("{skip_name}.w")) {
            self.conv(&skip_name, x, 1, 0)?
        } else {
            x
        };
        self.g.add(skip, h)
    }

    /// C×H×W → (H·W)×C token matrix.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.g.value(x).chw()?;
        let flat = self.g.reshape(x, &[c, h * w])?;
        self.g.transpose(flat)
    }

    /// (H·W)×C token matrix → C×H×W.
    pub fn from_tokens(&mut self, t: Var, h: usize, w: usize) -> Result<Var> {
        let c = self.g.shape(t)[1];
        let tt = self.g.transpose(t)?;
        self.g.reshape(tt, &[c, h, w])
    }
}

pub mod init_blocks {
    use rand::Rng;

    use crate::params::{init, ParamStore};

    pub fn res_block(s: &mut ParamStore, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize, t_dim: usize) {
        init::norm_affine(s, &format!("{name}.n1"), c_in);
        init::conv(s, rng, &format!("{name}.c1"), c_out, c_in, 3);
        init::linear(s, rng, &format!("{name}.t"), t_dim, c_out);
        init::norm_affine(s, &format!("{name}.n2"), c_out);
        init::conv(s, rng, &format!("{name}.c2"), c_out, c_out, 3);
        if c_in != c_out {
            init::conv(s, rng, &format!("{name}.skip"), c_out, c_in, 1);
        }
    }

    pub fn cross_attention(s: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize, ctx_dim: usize) {
        init::norm_affine(s, &format!("{name}.n"), c);
        init::linear(s, rng, &format!("{name}.q"), c, c);
        init::linear(s, rng, &format!("{name}.k"), ctx_dim, c);
        init::linear(s, rng, &format!("{name}.v"), ctx_dim, c);
        init::linear(s, rng, &format!("{name}.o"), c, c);
    }
}
