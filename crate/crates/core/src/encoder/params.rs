use std::collections::BTreeSet;
use std::fmt;

use indexmap::IndexMap;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{LanguageId, DEFAULT_OUTPUT_DIM, DEFAULT_PASSAGE_LEN};

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub num_layers: usize,
    pub output_dim: usize,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 1024,
            hidden_dim: 32,
            bottleneck_dim: 8,
            num_layers: 2,
            output_dim: DEFAULT_OUTPUT_DIM,
            max_positions: DEFAULT_PASSAGE_LEN,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("bottleneck_dim", self.bottleneck_dim),
            ("num_layers", self.num_layers),
            ("output_dim", self.output_dim),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.vocab_size <= crate::scoring::FIRST_TEXT_TOKEN as usize {
            return Err(Error::InvalidConfig("vocab_size too small".into()));
        }
        Ok(())
    }
}

/// Learning stage; decides which parameter groups an update may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
    Zeroshot,
    Extend,
}

impl Stage {
    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Stage::Pretrain => 0,
            Stage::Finetune => 1,
            Stage::Zeroshot => 2,
            Stage::Extend => 3,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Stage::Pretrain,
            1 => Stage::Finetune,
            2 => Stage::Zeroshot,
            3 => Stage::Extend,
            other => return Err(Error::Format(format!("unknown stage byte {other}"))),
        })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Zeroshot => "zeroshot",
            Stage::Extend => "extend",
        };
        f.write_str(s)
    }
}

/// One shared block: `z = tanh(h·mix + mean(h)·context + bias)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedLayer {
    pub mix: Array2<f64>,
    pub context: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Bottleneck adapter: `a = tanh(z·down + down_bias)·up + up_bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBlock {
    pub down: Array2<f64>,
    pub down_bias: Array1<f64>,
    pub up: Array2<f64>,
    pub up_bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Embedding,
    /// Position table and every shared layer.
    Shared,
    Output,
    Adapter(LanguageId),
}

/// All tensors of the model. The same layout doubles as a gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub embedding: Array2<f64>,
    /// Per-token bias of the tied masked-token head.
    pub mlm_bias: Array1<f64>,
    pub positions: Array2<f64>,
    pub layers: Vec<SharedLayer>,
    pub output: Array2<f64>,
    pub adapters: IndexMap<LanguageId, Vec<AdapterBlock>>,
}

fn uniform2(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-INIT_SCALE..INIT_SCALE))
}

fn uniform1(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.gen_range(-INIT_SCALE..INIT_SCALE))
}

pub(crate) fn init_adapters(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Vec<AdapterBlock> {
    let (d, b) = (config.hidden_dim, config.bottleneck_dim);
    (0..config.num_layers)
        .map(|_| AdapterBlock {
            down: uniform2(rng, d, b),
            down_bias: uniform1(rng, b),
            up: uniform2(rng, b, d),
            up_bias: uniform1(rng, d),
        })
        .collect()
}

impl Weights {
    pub fn zeros_like(other: &Weights) -> Weights {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        Weights {
            embedding: z2(&other.embedding),
            mlm_bias: z1(&other.mlm_bias),
            positions: z2(&other.positions),
            layers: other
                .layers
                .iter()
                .map(|l| SharedLayer {
                    mix: z2(&l.mix),
                    context: z2(&l.context),
                    bias: z1(&l.bias),
                })
                .collect(),
            output: z2(&other.output),
            adapters: other
                .adapters
                .iter()
                .map(|(lang, blocks)| {
                    let zeros = blocks
                        .iter()
                        .map(|a| AdapterBlock {
                            down: z2(&a.down),
                            down_bias: z1(&a.down_bias),
                            up: z2(&a.up),
                            up_bias: z1(&a.up_bias),
                        })
                        .collect();
                    (lang.clone(), zeros)
                })
                .collect(),
        }
    }

    /// Tensors of one group in declaration order.
    pub fn group_slices(&self, group: &ParamGroup) -> Vec<&[f64]> {
        fn s2(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        fn s1(a: &Array1<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        match group {
            ParamGroup::Embedding => vec![s2(&self.embedding), s1(&self.mlm_bias)],
            ParamGroup::Output => vec![s2(&self.output)],
            ParamGroup::Shared => {
                let mut out = vec![s2(&self.positions)];
                for l in &self.layers {
                    out.extend([s2(&l.mix), s2(&l.context), s1(&l.bias)]);
                }
                out
            }
            ParamGroup::Adapter(lang) => self
                .adapters
                .get(lang)
                .map(|blocks| {
                    blocks
                        .iter()
                        .flat_map(|a| [s2(&a.down), s1(&a.down_bias), s2(&a.up), s1(&a.up_bias)])
                        .collect()
                })
                .unwrap_or_default(),
        }
    }

    pub fn group_slices_mut(&mut self, group: &ParamGroup) -> Vec<&mut [f64]> {
        fn s2(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        fn s1(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        match group {
            ParamGroup::Embedding => vec![s2(&mut self.embedding), s1(&mut self.mlm_bias)],
            ParamGroup::Output => vec![s2(&mut self.output)],
            ParamGroup::Shared => {
                let mut out = vec![s2(&mut self.positions)];
                for l in &mut self.layers {
                    out.push(s2(&mut l.mix));
                    out.push(s2(&mut l.context));
                    out.push(s1(&mut l.bias));
                }
                out
            }
            ParamGroup::Adapter(lang) => match self.adapters.get_mut(lang) {
                Some(blocks) => {
                    let mut out = Vec::new();
                    for a in blocks {
                        out.push(s2(&mut a.down));
                        out.push(s1(&mut a.down_bias));
                        out.push(s2(&mut a.up));
                        out.push(s1(&mut a.up_bias));
                    }
                    out
                }
                None => Vec::new(),
            },
        }
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Embedding, ParamGroup::Shared, ParamGroup::Output];
        g.extend(self.adapters.keys().cloned().map(ParamGroup::Adapter));
        g
    }

    /// Little-endian bytes of every value in the group.
    pub fn group_bytes(&self, group: &ParamGroup) -> Vec<u8> {
        self.group_slices(group)
            .into_iter()
            .flatten()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }
}

/// The single parameter set shared by the query and passage encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct ModularEncoderParams {
    pub(crate) config: EncoderConfig,
    pub(crate) stage: Stage,
    pub(crate) weights: Weights,
    /// Languages added after pretraining; the only trainable ones in the extend stage.
    pub(crate) extension_languages: BTreeSet<LanguageId>,
}

impl ModularEncoderParams {
    /// Seeded initialization in `Pretrain` stage with adapters for `languages`.
    pub fn new(config: EncoderConfig, languages: &[LanguageId], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let embedding = uniform2(&mut rng, config.vocab_size, d);
        let mlm_bias = uniform1(&mut rng, config.vocab_size);
        let positions = uniform2(&mut rng, config.max_positions, d);
        let layers = (0..config.num_layers)
            .map(|_| SharedLayer {
                mix: uniform2(&mut rng, d, d),
                context: uniform2(&mut rng, d, d),
                bias: uniform1(&mut rng, d),
            })
            .collect();
        let output = uniform2(&mut rng, d, config.output_dim);
        let mut adapters = IndexMap::new();
        for lang in languages {
            if adapters.contains_key(lang) {
                return Err(Error::DuplicateLanguage(lang.to_string()));
            }
            adapters.insert(lang.clone(), init_adapters(&config, &mut rng));
        }
        Ok(ModularEncoderParams {
            config,
            stage: Stage::Pretrain,
            weights: Weights {
                embedding,
                mlm_bias,
                positions,
                layers,
                output,
                adapters,
            },
            extension_languages: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Direct mutable access, used by gradient checks and tests that hand-set values.
    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn languages(&self) -> impl Iterator<Item = &LanguageId> {
        self.weights.adapters.keys()
    }

    pub fn has_language(&self, lang: &LanguageId) -> bool {
        self.weights.adapters.contains_key(lang)
    }

    pub fn extension_languages(&self) -> &BTreeSet<LanguageId> {
        &self.extension_languages
    }

    pub fn group_bytes(&self, group: &ParamGroup) -> Vec<u8> {
        self.weights.group_bytes(group)
    }

    /// Moves to the next learning stage.
    ///
    /// Allowed: pretrain → finetune → zeroshot, and extend from any stage
    /// after pretraining has produced a model (pretrain, finetune, zeroshot),
    /// with extend → zeroshot to finish.
    pub fn set_stage(&mut self, next: Stage) -> Result<()> {
        use Stage::*;
        let ok = matches!(
            (self.stage, next),
            (Pretrain, Finetune)
                | (Finetune, Zeroshot)
                | (Pretrain, Extend)
                | (Finetune, Extend)
                | (Zeroshot, Extend)
                | (Extend, Zeroshot)
        ) || self.stage == next;
        if !ok {
            return Err(Error::Stage(format!(
                "cannot move from {} to {}",
                self.stage, next
            )));
        }
        self.stage = next;
        Ok(())
    }

    /// Groups an update may modify in the current stage. `lang` is the
    /// language of the sample being trained on (MLM stages only).
    pub(crate) fn trainable_groups(&self, lang: Option<&LanguageId>) -> Vec<ParamGroup> {
        match self.stage {
            Stage::Pretrain => {
                let mut g = vec![ParamGroup::Embedding, ParamGroup::Shared];
                if let Some(l) = lang {
                    g.push(ParamGroup::Adapter(l.clone()));
                }
                g
            }
            Stage::Finetune => vec![ParamGroup::Shared, ParamGroup::Output],
            Stage::Extend => lang
                .filter(|l| self.extension_languages.contains(*l))
                .map(|l| vec![ParamGroup::Adapter(l.clone())])
                .unwrap_or_default(),
            Stage::Zeroshot => Vec::new(),
        }
    }

    pub(crate) fn apply_sgd(&mut self, grads: &Weights, groups: &[ParamGroup], lr: f64) {
        if lr == 0.0 {
            return;
        }
        for group in groups {
            let g = grads.group_slices(group);
            let p = self.weights.group_slices_mut(group);
            for (pt, gt) in p.into_iter().zip(g) {
                for (w, dw) in pt.iter_mut().zip(gt) {
                    *w -= lr * dw;
                }
            }
        }
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        for group in self.weights.groups() {
            if self
                .weights
                .group_slices(&group)
                .iter()
                .any(|s| s.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::NonFinite(format!("parameter group {group:?}")));
            }
        }
        Ok(())
    }
}
