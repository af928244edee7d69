use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Request};
use axum::http::{header, StatusCode};
use base64::Engine;
use serde::Deserialize;
use tapseg::guidance::{Click, GuidanceKind};

use crate::error::ApiError;

/// A click as sent by clients; signed so that negative coordinates produce a
/// field error instead of a parse failure.
#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
pub struct ClickIn {
    pub x: i64,
    pub y: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentRequest {
    pub image: Vec<u8>,
    pub clicks: Vec<ClickIn>,
    pub guidance_kind: Option<GuidanceKind>,
    pub threshold: f64,
}

#[derive(Deserialize)]
struct JsonRequest {
    image: Option<String>,
    clicks: Option<Vec<ClickIn>>,
    guidance_kind: Option<String>,
    threshold: Option<f64>,
}

fn parse_kind(s: &str) -> Result<GuidanceKind, ApiError> {
    s.parse().map_err(|e: tapseg::Error| ApiError::bad_request("guidance_kind", e.to_string()))
}

fn check_threshold(t: f64) -> Result<f64, ApiError> {
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(ApiError::bad_request("threshold", format!("threshold {t} is outside [0, 1]")))
    }
}

/// `x,y` pairs separated by `;` or whitespace, or a JSON list of objects.
fn parse_click_text(s: &str) -> Result<Vec<ClickIn>, ApiError> {
    let s = s.trim();
    if s.starts_with('[') {
        return serde_json::from_str(s).map_err(|e| ApiError::bad_request("clicks", format!("invalid click list: {e}")));
    }
    s.split(|c: char| c == ';' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (x, y) = p
                .split_once(',')
                .ok_or_else(|| ApiError::bad_request("clicks", format!("click `{p}` is not of the form x,y")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<i64>()
                    .map_err(|_| ApiError::bad_request("clicks", format!("click coordinate `{v}` is not an integer")))
            };
            Ok(ClickIn { x: num(x)?, y: num(y)? })
        })
        .collect()
}

fn body_error(status: StatusCode, text: String) -> ApiError {
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::too_large(text)
    } else {
        ApiError::bad_request("body", text)
    }
}

impl SegmentRequest {
    pub async fn from_http(req: Request) -> Result<Self, ApiError> {
        let content_type = req
            .headers()
            .get(header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("")
            .to_ascii_lowercase();
        if content_type.starts_with("multipart/form-data") {
            let multipart = Multipart::from_request(req, &())
                .await
                .map_err(|e| ApiError::bad_request("body", e.body_text()))?;
            Self::from_multipart(multipart).await
        } else {
            let bytes = Bytes::from_request(req, &()).await.map_err(|e| body_error(e.status(), e.body_text()))?;
            Self::from_json(&bytes)
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ApiError> {
        let raw: JsonRequest =
            serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request("body", format!("invalid JSON: {e}")))?;
        let encoded = raw.image.ok_or_else(|| ApiError::bad_request("image", "missing field"))?;
        // Tolerate data URLs from browsers.
        let encoded = encoded.split_once("base64,").map(|(_, b)| b).unwrap_or(&encoded);
        let image = base64::engine::general_purpose::STANDARD
            .decode(encoded.trim())
            .map_err(|e| ApiError::bad_request("image", format!("invalid base64: {e}")))?;
        let clicks = raw.clicks.ok_or_else(|| ApiError::bad_request("clicks", "missing field"))?;
        Ok(SegmentRequest {
            image,
            clicks,
            guidance_kind: raw.guidance_kind.as_deref().map(parse_kind).transpose()?,
            threshold: check_threshold(raw.threshold.unwrap_or(0.5))?,
        })
    }

    async fn from_multipart(mut mp: Multipart) -> Result<Self, ApiError> {
        let mut image = None;
        let mut clicks = Vec::new();
        let mut guidance_kind = None;
        let mut threshold = 0.5;
        while let Some(field) =
            mp.next_field().await.map_err(|e| body_error(e.status(), e.body_text()))?
        {
            let name = field.name().unwrap_or("").to_string();
            let data = field.bytes().await.map_err(|e| body_error(e.status(), e.body_text()))?;
            let text = || {
                std::str::from_utf8(&data)
                    .map(str::to_string)
                    .map_err(|_| ApiError::bad_request(name.clone(), "field is not UTF-8 text"))
            };
            match name.as_str() {
                "image" => image = Some(data.to_vec()),
                "clicks" | "click" => clicks.extend(parse_click_text(&text()?)?),
                "guidance_kind" => guidance_kind = Some(parse_kind(text()?.trim())?),
                "threshold" => {
                    threshold = text()?
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| ApiError::bad_request("threshold", "not a number"))?;
                }
                _ => {}
            }
        }
        Ok(SegmentRequest {
            image: image.ok_or_else(|| ApiError::bad_request("image", "missing field"))?,
            clicks,
            guidance_kind,
            threshold: check_threshold(threshold)?,
        })
    }

    /// All clicks checked against the decoded image size.
    pub fn validated_clicks(&self, height: usize, width: usize) -> Result<Vec<Click>, ApiError> {
        if self.clicks.is_empty() {
            return Err(ApiError::bad_request("clicks", "at least one click is required"));
        }
        self.clicks
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if c.x < 0 || c.y < 0 || c.x as usize >= width || c.y as usize >= height {
                    Err(ApiError::bad_request(
                        format!("clicks[{i}]"),
                        format!("click ({}, {}) lies outside the {width}x{height} image", c.x, c.y),
                    ))
                } else {
                    Ok(Click::new(c.x as usize, c.y as usize))
                }
            })
            .collect()
    }
}
