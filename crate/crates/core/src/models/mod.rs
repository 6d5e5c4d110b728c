//! The four patch classifiers, their configuration and parameter budgets.

mod embedding;
mod io;
mod network;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use embedding::Embedding;
pub use io::{load_weights, save_weights, WEIGHTS_VERSION};
pub use network::{Batch, ClassifierGradTarget, Network};

use crate::datacube::N_CHANNELS;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchitectureId {
    #[serde(rename = "BasicCNN", alias = "basic_cnn")]
    BasicCnn,
    #[serde(rename = "DeeperCNN1", alias = "deeper_cnn1")]
    DeeperCnn1,
    #[serde(rename = "DeeperCNN2", alias = "deeper_cnn2")]
    DeeperCnn2,
    #[serde(rename = "ConvLSTM", alias = "convlstm")]
    ConvLstm,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 4] = [Self::BasicCnn, Self::DeeperCnn1, Self::DeeperCnn2, Self::ConvLstm];

    pub fn name(self) -> &'static str {
        match self {
            Self::BasicCnn => "BasicCNN",
            Self::DeeperCnn1 => "DeeperCNN1",
            Self::DeeperCnn2 => "DeeperCNN2",
            Self::ConvLstm => "ConvLSTM",
        }
    }

    /// Learnable-parameter count reported for the architecture.
    pub fn budget(self) -> usize {
        match self {
            Self::BasicCnn => 40_600,
            Self::DeeperCnn1 => 66_500,
            Self::DeeperCnn2 => 111_000,
            Self::ConvLstm => 371_000,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s) || format!("{a:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: ArchitectureId,
    /// Output channels of each conv block (conv, batchnorm, relu, maxpool).
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub padding: Padding,
    /// Hidden dense widths; each is followed by batchnorm, relu and dropout.
    pub classifier_widths: Vec<usize>,
    pub dropout: f64,
    /// ConvLSTM hidden filters (ignored by the CNNs).
    pub convlstm_hidden: usize,
    pub embedding_dim: usize,
    pub clc_classes: usize,
    pub continuous_channels: usize,
    pub patch_size: usize,
    pub temporal_len: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn default_for(architecture: ArchitectureId) -> Self {
        let (conv_channels, classifier_widths, temporal_len) = match architecture {
            ArchitectureId::BasicCnn => (vec![16], vec![16, 16], 1),
            ArchitectureId::DeeperCnn1 => (vec![16, 32, 64], vec![64, 32], 1),
            ArchitectureId::DeeperCnn2 => (vec![16, 32, 64, 128], vec![64, 32], 1),
            ArchitectureId::ConvLstm => (vec![32], vec![64, 32], 10),
        };
        Self {
            architecture,
            conv_channels,
            kernel: 3,
            padding: Padding::Same,
            classifier_widths,
            dropout: 0.5,
            convlstm_hidden: 32,
            embedding_dim: 10,
            clc_classes: 15,
            continuous_channels: N_CHANNELS,
            patch_size: 25,
            temporal_len,
            init_seed: 0,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        self.architecture == ArchitectureId::ConvLstm
    }

    pub fn input_channels(&self) -> usize {
        self.continuous_channels + self.embedding_dim
    }

    fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => (self.kernel - 1) / 2,
            Padding::Valid => 0,
        }
    }

    /// Spatial extent after every conv block.
    pub fn block_extents(&self) -> Result<Vec<usize>> {
        let mut s = self.patch_size;
        let mut out = Vec::new();
        for _ in &self.conv_channels {
            let conv = (s + 2 * self.pad()).checked_sub(self.kernel - 1).unwrap_or(0);
            s = conv / 2;
            if s == 0 {
                return Err(Error::Config(format!(
                    "{} conv blocks shrink a {}-pixel patch to nothing",
                    self.conv_channels.len(),
                    self.patch_size
                )));
            }
            out.push(s);
        }
        Ok(out)
    }

    pub fn flatten_len(&self) -> Result<usize> {
        let s = *self.block_extents()?.last().unwrap_or(&self.patch_size);
        Ok(self.conv_channels.last().copied().unwrap_or(self.first_channels()) * s * s)
    }

    /// Channels entering the first conv block.
    fn first_channels(&self) -> usize {
        if self.is_recurrent() {
            self.convlstm_hidden
        } else {
            self.input_channels()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return bad(format!("patch size {} must be odd", self.patch_size));
        }
        if self.embedding_dim == 0 || self.clc_classes == 0 || self.continuous_channels == 0 {
            return bad("embedding, class table and channel counts must be positive".into());
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("at least one conv block with positive width is required".into());
        }
        if self.classifier_widths.contains(&0) {
            return bad("classifier widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.temporal_len == 0 || (!self.is_recurrent() && self.temporal_len != 1) {
            return bad(format!(
                "{} cannot take temporal length {}",
                self.architecture, self.temporal_len
            ));
        }
        if self.is_recurrent() && self.convlstm_hidden == 0 {
            return bad("ConvLSTM hidden filters must be positive".into());
        }
        if self.is_recurrent() && self.padding != Padding::Same {
            return bad("the ConvLSTM cell needs same padding".into());
        }
        self.block_extents()?;
        Ok(())
    }
}

/// Named parameter counts per layer plus the total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub architecture: ArchitectureId,
    pub layers: Vec<(String, usize)>,
    pub total: usize,
    pub budget: usize,
    pub deviation: f64,
    pub conv_channels: Vec<usize>,
    pub classifier_widths: Vec<usize>,
    pub convlstm_hidden: Option<usize>,
    pub warning: Option<String>,
}

impl fmt::Display for BuildReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}: {} learnable parameters", self.architecture, self.total)?;
        writeln!(
            f,
            "  reference {} ({:+.2}%), conv {:?}, classifier {:?}{}",
            self.budget,
            100.0 * self.deviation,
            self.conv_channels,
            self.classifier_widths,
            self.convlstm_hidden.map(|h| format!(", cell hidden {h}")).unwrap_or_default()
        )?;
        for (name, n) in &self.layers {
            writeln!(f, "  {name:<28} {n:>9}")?;
        }
        if let Some(w) = &self.warning {
            writeln!(f, "  warning: {w}")?;
        }
        Ok(())
    }
}

/// Closed-form parameter count per layer (batchnorm counts gamma and beta).
pub fn layer_counts(cfg: &ModelConfig) -> Result<Vec<(String, usize)>> {
    cfg.validate()?;
    let k2 = cfg.kernel * cfg.kernel;
    let mut out = vec![("embedding".to_string(), cfg.clc_classes * cfg.embedding_dim)];
    let mut c = cfg.input_channels();
    if cfg.is_recurrent() {
        let f = cfg.convlstm_hidden;
        out.push(("cell".into(), (c + f) * 4 * f * k2 + 4 * f));
        c = f;
    }
    for (i, &o) in cfg.conv_channels.iter().enumerate() {
        out.push((format!("block{i}.conv"), c * o * k2 + o));
        out.push((format!("block{i}.bn"), 2 * o));
        c = o;
    }
    let mut d = cfg.flatten_len()?;
    for (i, &wd) in cfg.classifier_widths.iter().enumerate() {
        out.push((format!("fc{i}.dense"), d * wd + wd));
        out.push((format!("fc{i}.bn"), 2 * wd));
        d = wd;
    }
    out.push(("head".into(), d * 2 + 2));
    Ok(out)
}

pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(layer_counts(cfg)?.iter().map(|(_, n)| n).sum())
}

pub fn build_report(cfg: &ModelConfig) -> Result<BuildReport> {
    let layers = layer_counts(cfg)?;
    let total = layers.iter().map(|(_, n)| n).sum();
    let budget = cfg.architecture.budget();
    let deviation = (total as f64 - budget as f64) / budget as f64;
    let warning = (deviation.abs() > 0.25).then(|| {
        format!(
            "{total} parameters deviate {:.1}% from the reference {budget}",
            100.0 * deviation
        )
    });
    if let Some(w) = &warning {
        log::warn!("{}: {w}", cfg.architecture);
    }
    Ok(BuildReport {
        architecture: cfg.architecture,
        layers,
        total,
        budget,
        deviation,
        conv_channels: cfg.conv_channels.clone(),
        classifier_widths: cfg.classifier_widths.clone(),
        convlstm_hidden: cfg.is_recurrent().then_some(cfg.convlstm_hidden),
        warning,
    })
}

/// Training provenance stored with the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub dropout_seed: u64,
    pub epochs_trained: usize,
    pub best_epoch: Option<usize>,
}

/// A trained (or freshly initialized) f32 model with its provenance.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub network: Network<f32>,
    pub provenance: Provenance,
}

impl ModelBundle {
    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }
}

pub fn build_model(cfg: &ModelConfig) -> Result<ModelBundle> {
    Ok(ModelBundle {
        network: Network::new(cfg)?,
        provenance: Provenance {
            init_seed: cfg.init_seed,
            ..Default::default()
        },
    })
}
