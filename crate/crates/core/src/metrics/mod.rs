//! Reconstruction quality and the PAN-as-proxy correlation study.

mod correlation;
mod quality;

pub use correlation::{correlation_map, proxy_compare, CorrProxyReport, CorrelationConfig};
pub use quality::{psnr, ssim, ssim_per_band, QualityReport};
