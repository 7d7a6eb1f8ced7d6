use std::fmt;

use serde::{Deserialize, Serialize};
use taemi_core::model::{Anchor, Fusion, TaemiConfig};

/// Architectural variants compared by the ablation table. Each one changes
/// a single factor of the base configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SimpleConcat,
    SelfAttentionOnly,
    NoMissingTokens,
    NoModalityDropout,
    AudioAnchor,
    VisionAnchor,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::SimpleConcat,
        Variant::SelfAttentionOnly,
        Variant::NoMissingTokens,
        Variant::NoModalityDropout,
        Variant::AudioAnchor,
        Variant::VisionAnchor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SimpleConcat => "simple_concat",
            Variant::SelfAttentionOnly => "self_attention_only",
            Variant::NoMissingTokens => "no_missing_tokens",
            Variant::NoModalityDropout => "no_modality_dropout",
            Variant::AudioAnchor => "audio_anchor",
            Variant::VisionAnchor => "vision_anchor",
        }
    }

    pub fn apply(self, base: &TaemiConfig) -> TaemiConfig {
        let mut c = base.clone();
        let reset_fusion = |c: &mut TaemiConfig, fusion| {
            c.fusion = fusion;
            c.anchor = Anchor::Text;
            c.shared_text_query = false;
        };
        match self {
            Variant::Full => {}
            Variant::SimpleConcat => reset_fusion(&mut c, Fusion::SimpleConcat),
            Variant::SelfAttentionOnly => reset_fusion(&mut c, Fusion::SelfAttentionOnly),
            Variant::NoMissingTokens => c.use_missing_tokens = false,
            Variant::NoModalityDropout => c.modality_dropout_p = 0.0,
            Variant::AudioAnchor => {
                reset_fusion(&mut c, Fusion::TaCrossAttention);
                c.anchor = Anchor::Audio;
            }
            Variant::VisionAnchor => {
                reset_fusion(&mut c, Fusion::TaCrossAttention);
                c.anchor = Anchor::Vision;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Best validation mean ρ per seed, in the order of [`AblationTable::seeds`].
    pub rho: Vec<Option<f64>>,
    /// Average over the seeds with a defined correlation.
    pub mean_rho: Option<f64>,
    /// `mean_rho − mean_rho(full)`; absent without a full row.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// `results[v][s]` is the score of variant `v` under seed `s`.
    pub fn new(seeds: Vec<u64>, results: Vec<(Variant, Vec<Option<f64>>)>) -> Self {
        let mut rows: Vec<AblationRow> = results
            .into_iter()
            .map(|(variant, rho)| {
                let defined: Vec<f64> = rho.iter().flatten().copied().collect();
                let mean_rho = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
                AblationRow {
                    variant,
                    rho,
                    mean_rho,
                    delta: None,
                }
            })
            .collect();
        let full = rows.iter().find(|r| r.variant == Variant::Full).and_then(|r| r.mean_rho);
        for r in &mut rows {
            r.delta = full.zip(r.mean_rho).map(|(f, m)| m - f);
        }
        AblationTable { seeds, rows }
    }

    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant");
        for s in &self.seeds {
            out.push_str(&format!(",rho_seed_{s}"));
        }
        out.push_str(",mean_rho,delta\n");
        for r in &self.rows {
            out.push_str(r.variant.name());
            for v in &r.rho {
                out.push(',');
                out.push_str(&cell(*v, 17));
            }
            out.push_str(&format!(",{},{}\n", cell(r.mean_rho, 17), cell(r.delta, 17)));
        }
        out
    }
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.digits$e}"))
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_w = self.rows.iter().map(|r| r.variant.name().len()).max().unwrap_or(7).max(7);
        write!(f, "{:<name_w$}", "variant")?;
        for s in &self.seeds {
            write!(f, "  {:>9}", format!("seed {s}"))?;
        }
        writeln!(f, "  {:>9}  {:>9}", "mean rho", "delta")?;
        let fixed = |v: Option<f64>, signed: bool| match v {
            Some(x) if signed => format!("{x:+.4}"),
            Some(x) => format!("{x:.4}"),
            None => "undefined".into(),
        };
        for (i, r) in self.rows.iter().enumerate() {
            write!(f, "{:<name_w$}", r.variant.name())?;
            for v in &r.rho {
                write!(f, "  {:>9}", fixed(*v, false))?;
            }
            write!(f, "  {:>9}  {:>9}", fixed(r.mean_rho, false), fixed(r.delta, true))?;
            if i + 1 < self.rows.len() {
                writeln!(f)?;
            }
        }
        Ok(())
    }
}
