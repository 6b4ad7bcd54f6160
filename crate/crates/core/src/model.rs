use crate::backbone::{self, BackboneConfig, BlockHook, ForwardOutput};
use crate::diffusion::Denoiser;
use crate::dmp::{self, GateTrace, LayerGate, Patch, PatchHook};
use crate::error::Result;
use crate::numcore::{Bindings, ParamStore, Real, Rng, Tape, Tensor};

/// A backbone, an optional patch, and the parameters of both.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: BackboneConfig,
    pub patch: Patch,
    pub params: ParamStore,
}

impl Model {
    /// Randomly initialized, fully trainable backbone.
    pub fn init(backbone: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        let params = backbone::init_params(&backbone, rng)?;
        Ok(Model {
            backbone,
            patch: Patch::None,
            params,
        })
    }

    /// Adds fresh patch parameters to a copy of this model.
    pub fn with_patch(&self, patch: Patch, rng: &mut Rng) -> Result<Self> {
        let mut params = self.params.clone();
        params.set_trainable_where(false, dmp::is_patch_param);
        for (name, t) in dmp::init_params(&self.backbone, &patch, rng)?.into_map() {
            params.insert(name, t);
        }
        Ok(Model {
            backbone: self.backbone.clone(),
            patch,
            params,
        })
    }

    /// Forward pass on an existing tape. The returned gates are empty unless a
    /// linear-gated patch is present.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binds: &Bindings,
        x_t: &Tensor,
        t: &[usize],
        labels: Option<&[usize]>,
    ) -> Result<(ForwardOutput, Vec<LayerGate>)> {
        match self.patch {
            Patch::None => {
                let out = backbone::forward(&self.backbone, tape, binds, x_t, t, labels, None)?;
                Ok((out, Vec::new()))
            }
            _ => {
                let mut hook = PatchHook::new(&self.backbone, &self.patch, binds);
                let out = backbone::forward(
                    &self.backbone,
                    tape,
                    binds,
                    x_t,
                    t,
                    labels,
                    Some(&mut hook as &mut dyn BlockHook<T>),
                )?;
                Ok((out, hook.gates))
            }
        }
    }

    /// Full `[B, H, W, 2C]` output.
    pub fn predict_full(&self, x_t: &Tensor, t: &[usize], labels: Option<&[usize]>) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let binds = self.params.bind(&mut tape);
        let (out, _) = self.forward(&mut tape, &binds, x_t, t, labels)?;
        Ok(tape.to_tensor(out.out))
    }

    /// Noise prediction together with the gate activity that produced it.
    pub fn predict_traced(&self, x_t: &Tensor, t: &[usize], labels: Option<&[usize]>) -> Result<(Tensor, GateTrace)> {
        let mut tape = Tape::<f32>::new();
        let binds = self.params.bind(&mut tape);
        let (out, gates) = self.forward(&mut tape, &binds, x_t, t, labels)?;
        Ok((tape.to_tensor(out.eps), GateTrace::from_tape(&tape, &gates, t)))
    }

    pub fn backbone_digest(&self) -> u64 {
        backbone::backbone_digest(&self.params)
    }
}

impl Denoiser for Model {
    fn image_shape(&self) -> [usize; 3] {
        let s = self.backbone.image_size;
        [s, s, self.backbone.channels]
    }

    fn num_classes(&self) -> Option<usize> {
        self.backbone.conditional().then_some(self.backbone.num_classes)
    }

    fn predict_eps(&self, x_t: &Tensor, t: &[usize], labels: Option<&[usize]>) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let binds = self.params.bind(&mut tape);
        let (out, _) = self.forward(&mut tape, &binds, x_t, t, labels)?;
        Ok(tape.to_tensor(out.eps))
    }
}
