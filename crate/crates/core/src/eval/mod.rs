//! Response generation, BLEU/Distinct scoring and memory inspection.

mod decode;
mod metrics;
mod pca;
mod report;

pub use decode::{generate, DecodeConfig, Strategy};
pub use metrics::{bleu, distinct_n};
pub use pca::{export_memory_pca, pca_2d, pca_csv, PcaProjection, PCA_HEADER, PCA_TOLERANCE};
pub use report::{
    generate_all, generations_tsv, load_generations, parse_generations_tsv, Generation, MetricReport,
};
