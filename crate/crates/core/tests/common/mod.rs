#![allow(dead_code)]

use idian::data::{compose_batches, Batch, SyntheticSpec};
use idian::experiment::{prepare_data, ExperimentConfig, PreparedData};
use idian::model::{ArchSpec, IdianModel};

pub fn tiny_arch() -> ArchSpec {
    ArchSpec {
        imputer_hidden: 6,
        encoder_hidden: 8,
        embed_dim: 5,
        decoder_hidden: 8,
        shared_hidden: 6,
        shared_dim: 4,
        discriminator_hidden: 6,
    }
}

pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synthetic = SyntheticSpec {
        n_per_class: 30,
        n_classes: 3,
        source_dim: 8,
        target_dim: 6,
        ..SyntheticSpec::default()
    };
    cfg.data.labeled_per_class = 3;
    cfg.model.arch = tiny_arch();
    cfg.train.batch_size = 16;
    cfg.train.epochs = 2;
    cfg
}

pub struct Setup {
    pub cfg: ExperimentConfig,
    pub data: PreparedData,
    pub model: IdianModel,
    pub batches: Vec<Batch>,
}

pub fn setup(seed: u64) -> Setup {
    let cfg = tiny_config();
    let data = prepare_data(&cfg, seed).unwrap();
    let model = IdianModel::new(
        data.source.dim,
        data.target_train.dim,
        data.target_train.n_classes,
        cfg.model.arch,
        seed,
    )
    .unwrap();
    let batches = compose_batches(&data.source, &data.target_train, cfg.train.batch_size, seed).unwrap();
    Setup {
        cfg,
        data,
        model,
        batches,
    }
}
