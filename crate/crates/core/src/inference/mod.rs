//! Forecasting, embedding extraction and heads trained on frozen
//! embeddings.

pub mod embed;
pub mod forecast;
pub mod heads;

pub use embed::{embedding_layout, extract_embedding, ts_fraction};
pub use forecast::{text_prefix, Decode, ForecastRequest, ForecastResult, ForecastTrace, Forecaster};
pub use heads::{train_forecast_head, train_linear_probe, train_mlp_head, DenseHead, HeadConfig};
