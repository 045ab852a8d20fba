//! The assembled network: text branch, image branch, and fusion head.

use crate::config::{FusionMode, RunConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    check_labels, classify, fuse_early, fuse_late, joint_loss, EarlyFusionParams, FusionParams, JointLoss,
    LateFusionParams,
};
use crate::gradcheck::{check_params, CheckReport, Coverage};
use crate::image::{encode_image, image_patches, Image, ImageBranchParams};
use crate::nn::{AttentionMask, Ctx, Initializer, ParamStore};
use crate::rng::{streams, Rng};
use crate::tensor::{Tensor, Var};
use crate::text::{encode_text, TextBranchParams, CLS, PAD};

/// A padded batch ready for the forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sample_ids: Vec<String>,
    /// `B * max_seq_len` token ids.
    pub token_ids: Vec<usize>,
    pub mask: AttentionMask,
    /// Standardized patches `[B, num_patches, patch_dim]`.
    pub patches: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Dtcn {
    pub config: RunConfig,
    pub store: ParamStore,
    pub text: TextBranchParams,
    pub image: ImageBranchParams,
    pub fusion: FusionParams,
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub logits: Var,
    pub loss: JointLoss,
}

impl Dtcn {
    /// Fresh parameters drawn from the run's init stream. Only the head of
    /// the configured fusion mode is created.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(c.seed, streams::INIT);
        let mut init = Initializer {
            store: &mut store,
            rng: &mut rng,
        };
        let text = TextBranchParams::init(
            &mut init,
            c.vocab_size,
            c.max_seq_len,
            c.hidden_dim,
            c.n_heads,
            c.ffn_dim(),
            c.text_layers,
            c.extra_text_layers,
        )?;
        let image = ImageBranchParams::init(
            &mut init,
            c.num_patches(),
            c.patch_dim(),
            c.hidden_dim,
            c.n_heads,
            c.ffn_dim(),
            c.image_layers,
        )?;
        let fusion = match c.fusion {
            FusionMode::Early => FusionParams::Early(EarlyFusionParams::init(&mut init, c.hidden_dim, c.num_classes)?),
            FusionMode::Late => FusionParams::Late(LateFusionParams::init(&mut init, c.hidden_dim, c.num_classes)?),
        };
        Ok(Self {
            config: config.clone(),
            store,
            text,
            image,
            fusion,
        })
    }

    /// Rebuilds the model for `config` and adopts `store`, which must hold
    /// exactly the expected names and shapes in order.
    pub fn with_params(config: &RunConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        if store.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, config implies {}",
                store.len(),
                model.store.len()
            )));
        }
        for ((name, t), (want_name, want)) in store.iter().zip(model.store.iter()) {
            if name != want_name || t.shape() != want.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` {:?} does not match expected `{want_name}` {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    /// Context for one pass over this model's parameters.
    pub fn ctx(&self, rng: Rng, training: bool) -> Ctx {
        Ctx::new(&self.store, rng, training, self.config.dropout)
    }

    /// `h_T` and `h_I`, each `[B, d]`.
    pub fn encode(&self, ctx: &mut Ctx, batch: &Batch) -> Result<(Var, Var)> {
        let h_t = encode_text(ctx, &self.text, &batch.token_ids, &batch.mask)?;
        let h_i = encode_image(ctx, &self.image, &batch.patches)?;
        Ok((h_t, h_i))
    }

    /// Logits and the three loss terms. Late fusion has no contrastive term;
    /// it is reported as zero.
    pub fn forward(&self, ctx: &mut Ctx, batch: &Batch) -> Result<Forward> {
        let (h_t, h_i) = self.encode(ctx, batch)?;
        match &self.fusion {
            FusionParams::Early(p) => {
                let fused = fuse_early(ctx, h_t, h_i, p)?;
                let logits = classify(ctx, fused.h_joint, p)?;
                let loss = joint_loss(
                    &mut ctx.tape,
                    logits,
                    &batch.labels,
                    fused.z_t,
                    fused.z_i,
                    self.config.tau,
                    self.config.lambda,
                )?;
                Ok(Forward { logits, loss })
            }
            FusionParams::Late(p) => {
                let logits = fuse_late(ctx, h_t, h_i, p)?;
                check_labels(&batch.labels, self.config.num_classes)?;
                let cls = ctx.tape.cross_entropy_from_logits(logits, &batch.labels)?;
                let contrast = ctx.tape.constant(Tensor::scalar(0.0));
                Ok(Forward {
                    logits,
                    loss: JointLoss {
                        total: cls,
                        cls,
                        contrast,
                    },
                })
            }
        }
    }
}

/// Row-wise argmax of a `[B, K]` logit matrix; the first maximum wins.
pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Random batch of `size` samples with variable-length texts, for checks
/// that need a forward pass without a dataset.
pub fn random_batch(config: &RunConfig, size: usize, seed: u64) -> Result<Batch> {
    let mut rng = Rng::new(seed);
    let n = config.max_seq_len;
    let mut token_ids = Vec::new();
    let mut valid = Vec::new();
    for _ in 0..size {
        let len = 1 + rng.below(n);
        for i in 0..n {
            token_ids.push(if i == 0 {
                CLS
            } else if i < len {
                2 + rng.below(config.vocab_size - 2)
            } else {
                PAD
            });
            valid.push(i < len);
        }
    }
    let px = config.image_height * config.image_width * config.channels;
    let images = (0..size)
        .map(|_| {
            let pixels = (0..px).map(|_| rng.uniform()).collect();
            Image::new(config.image_height, config.image_width, config.channels, pixels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        sample_ids: (0..size).map(|i| format!("r{i}")).collect(),
        token_ids,
        mask: AttentionMask::new(size, n, valid)?,
        patches: image_patches(&images.iter().collect::<Vec<_>>(), config.patch_size)?,
        labels: (0..size).map(|_| rng.below(config.num_classes)).collect(),
    })
}

/// Finite-difference check of every parameter of a freshly initialized
/// model on a random 2-sample batch, dropout active.
pub fn check_model_gradients(config: &RunConfig, coverage: Coverage) -> Result<Vec<CheckReport>> {
    let model = Dtcn::new(config)?;
    let batch = random_batch(config, 2, config.seed)?;
    let seed = config.seed;
    check_params(
        &format!("dtcn[{}]", config.fusion.as_str()),
        &model.store,
        None,
        coverage,
        |s| Ctx::new(s, Rng::substream(seed, streams::DROPOUT, 0), true, config.dropout),
        |ctx| Ok(model.forward(ctx, &batch)?.loss.total),
    )
}
