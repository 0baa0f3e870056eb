use serde::Serialize;

use super::model::BitAlignModel;
use crate::bpm::BpmBlock;
use crate::config::{AdapterKind, ModelConfig};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupCount {
    pub group: String,
    pub trainable: usize,
    pub frozen: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    /// In first-appearance order.
    pub groups: Vec<GroupCount>,
    pub trainable: usize,
    pub frozen: usize,
    /// Closed-form size of one bypass block, when the chain uses BPM blocks.
    pub bpm_block: Option<usize>,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }

    pub fn group(&self, name: &str) -> Option<&GroupCount> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,trainable,frozen,total\n");
        for g in &self.groups {
            out.push_str(&format!("{},{},{},{}\n", g.group, g.trainable, g.frozen, g.trainable + g.frozen));
        }
        out.push_str(&format!("all,{},{},{}\n", self.trainable, self.frozen, self.total()));
        out
    }
}

/// Exact counts from the parameter layout `config` produces.
pub fn count_params(config: &ModelConfig) -> Result<ParamCounts> {
    let layout = BitAlignModel::layout(config)?;
    let mut groups: Vec<GroupCount> = Vec::new();
    for s in layout.specs() {
        let idx = match groups.iter().position(|g| g.group == s.group()) {
            Some(i) => i,
            None => {
                groups.push(GroupCount {
                    group: s.group().to_string(),
                    trainable: 0,
                    frozen: 0,
                });
                groups.len() - 1
            }
        };
        if s.trainable {
            groups[idx].trainable += s.numel();
        } else {
            groups[idx].frozen += s.numel();
        }
    }
    let bpm_block = (!config.bpm_positions.is_empty() && config.adapter == AdapterKind::Bpm)
        .then(|| BpmBlock::closed_form_params(config.dim, config.d_down(), config.hw()));
    Ok(ParamCounts {
        groups,
        trainable: layout.count(Some(true)),
        frozen: layout.count(Some(false)),
        bpm_block,
    })
}

/// `2·m·k·n` for an `m×k` by `k×n` product.
pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}

/// Affine layer on `tokens` rows; bias adds are not counted.
pub fn affine_flops(tokens: usize, d_in: usize, d_out: usize) -> u64 {
    matmul_flops(tokens, d_in, d_out)
}

/// Pre-norm block on `t` tokens: QKV, scores, weighted values, output
/// projection and the two MLP layers.
pub fn block_flops(t: usize, d: usize, mlp_hidden: usize) -> u64 {
    affine_flops(t, d, 3 * d)
        + matmul_flops(t, d, t)
        + matmul_flops(t, t, d)
        + affine_flops(t, d, d)
        + affine_flops(t, d, mlp_hidden)
        + affine_flops(t, mlp_hidden, d)
}

/// Analytic count for one egocentric inference forward.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub patch_embed: u64,
    pub vit_blocks: Vec<u64>,
    pub depth_embed: u64,
    pub bypass: Vec<u64>,
    pub text: u64,
    pub fusion: u64,
    pub head: u64,
}

impl FlopReport {
    pub fn backbone(&self) -> u64 {
        self.patch_embed + self.vit_blocks.iter().sum::<u64>()
    }

    pub fn bpm(&self) -> u64 {
        self.depth_embed + self.bypass.iter().sum::<u64>()
    }

    pub fn total(&self) -> u64 {
        self.backbone() + self.bpm() + self.text + self.fusion + self.head
    }
}

/// Elementwise work is ignored except products that mix the head masks
/// and the text vector into the features.
pub fn flop_estimate(config: &ModelConfig) -> Result<FlopReport> {
    config.validate()?;
    let (d, hw, p) = (config.dim, config.hw(), config.patch);
    let t = hw + 1;
    let dd = config.d_down();
    let has_chain = !config.bpm_positions.is_empty();
    let per_bypass = match config.adapter {
        AdapterKind::Bpm => 2 * affine_flops(hw, d, dd) + affine_flops(hw, dd, d),
        AdapterKind::Baseline => affine_flops(hw, d, dd) + affine_flops(hw, dd, d),
    };
    let dt = config.text_dim;
    let lt = config.prompts + config.max_label_tokens();
    let text = (0..config.text_depth).map(|_| block_flops(lt, dt, 4 * dt)).sum::<u64>() + affine_flops(1, dt, d);
    let mut fusion = 0;
    if config.use_pt {
        fusion += matmul_flops(hw, d, 1);
    }
    if config.use_tfg {
        fusion += affine_flops(1, d, config.tfg_hidden)
            + affine_flops(1, config.tfg_hidden, config.heads)
            + 2 * (config.heads * hw * d) as u64;
    }
    Ok(FlopReport {
        patch_embed: affine_flops(hw, 3 * p * p, d),
        vit_blocks: (0..config.depth).map(|_| block_flops(t, d, config.mlp_hidden)).collect(),
        depth_embed: if has_chain { affine_flops(hw, p * p, d) } else { 0 },
        bypass: if has_chain { vec![per_bypass; config.bpm_positions.len()] } else { vec![] },
        text,
        fusion,
        head: matmul_flops(hw, d, 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_definition() {
        assert_eq!(affine_flops(64, 64, 64), 524_288);
    }

    #[test]
    fn additive_over_blocks() {
        let mut c = ModelConfig::toy();
        let a = flop_estimate(&c).unwrap();
        c.depth += 1;
        let b = flop_estimate(&c).unwrap();
        assert_eq!(b.total() - a.total(), block_flops(c.hw() + 1, c.dim, c.mlp_hidden));
        let parts = a.patch_embed + a.vit_blocks.iter().sum::<u64>() + a.depth_embed + a.bypass.iter().sum::<u64>();
        assert_eq!(a.total(), parts + a.text + a.fusion + a.head);
    }

    #[test]
    fn chain_is_cheap_at_toy_scale() {
        let r = flop_estimate(&ModelConfig::toy()).unwrap();
        assert!((r.bpm() as f64) < 0.1 * r.backbone() as f64);
    }

    #[test]
    fn counts_partition() {
        let c = count_params(&ModelConfig::toy()).unwrap();
        let t: usize = c.groups.iter().map(|g| g.trainable).sum();
        let f: usize = c.groups.iter().map(|g| g.frozen).sum();
        assert_eq!((t, f), (c.trainable, c.frozen));
        assert!(c.group("vit").unwrap().trainable == 0);
        assert!(c.to_csv().ends_with(&format!("all,{},{},{}\n", c.trainable, c.frozen, c.total())));
    }
}
