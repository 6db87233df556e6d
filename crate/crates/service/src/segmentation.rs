use std::time::Duration;

use lams_core::imageio::{encode_base64, encode_png};
use lams_core::masking::{SegmentationClient, SegmentationError, SegmentationResponse};
use lams_core::tensor::Image;
use serde::{Deserialize, Serialize};

/// Body POSTed to the segmentation endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRequest {
    pub image_png_base64: String,
    pub prompt: String,
}

/// Client for a segmentation sidecar.
///
/// The sidecar answers a [`SegmentationRequest`] with a
/// [`SegmentationResponse`] whose instances are run-length encoded at image
/// resolution. Connection failures, timeouts and 5xx replies are
/// `Unavailable`; anything else unexpected is `Protocol`.
pub struct HttpSegmenter {
    url: String,
    agent: ureq::Agent,
}

impl HttpSegmenter {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        Self { url: url.into(), agent }
    }
}

impl SegmentationClient for HttpSegmenter {
    fn name(&self) -> String {
        format!("http:{}", self.url)
    }

    fn segment(&self, image: &Image, prompt: &str) -> Result<SegmentationResponse, SegmentationError> {
        let png = encode_png(image).map_err(|e| SegmentationError::Protocol(e.to_string()))?;
        let body = SegmentationRequest { image_png_base64: encode_base64(&png), prompt: prompt.to_string() };
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .map_err(|e| SegmentationError::Unavailable(format!("{}: {e}", self.url)))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(SegmentationError::Unavailable(format!("{} returned {status}", self.url)));
        }
        if !status.is_success() {
            return Err(SegmentationError::Protocol(format!("{} returned {status}", self.url)));
        }
        resp.body_mut()
            .read_json::<SegmentationResponse>()
            .map_err(|e| SegmentationError::Protocol(format!("{}: {e}", self.url)))
    }
}
