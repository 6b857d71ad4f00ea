//! One JSON file per session: `<dir>/<image_id>.json`.

use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::ImageFormat;
use promptseg_core::ingest::{decode_label_map, encode_label_map};
use serde::{Deserialize, Serialize};

use crate::{ServiceError, Session};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionFile {
    pub image_id: String,
    pub active_backend: String,
    pub next_instance_id: u32,
    pub image_png_b64: String,
    /// 16-bit TIFF of the saved instances.
    pub saved_tiff_b64: String,
}

fn err(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Persist(e.to_string())
}

impl SessionFile {
    fn from_session(s: &Session) -> Result<Self, ServiceError> {
        let mut png = Cursor::new(Vec::new());
        s.image.write_to(&mut png, ImageFormat::Png).map_err(err)?;
        let tiff = encode_label_map(&s.saved, ImageFormat::Tiff).map_err(err)?;
        Ok(Self {
            image_id: s.image_id.clone(),
            active_backend: s.active_backend.clone(),
            next_instance_id: s.next_instance_id,
            image_png_b64: STANDARD.encode(png.into_inner()),
            saved_tiff_b64: STANDARD.encode(tiff),
        })
    }

    fn into_session(self) -> Result<Session, ServiceError> {
        let png = STANDARD.decode(&self.image_png_b64).map_err(err)?;
        let image = image::load_from_memory(&png).map_err(err)?.to_rgb8();
        let saved = decode_label_map(&STANDARD.decode(&self.saved_tiff_b64).map_err(err)?).map_err(err)?;
        if saved.dims() != (image.width() as usize, image.height() as usize) {
            return Err(err(format!("session {} has mismatched image and label sizes", self.image_id)));
        }
        Ok(Session {
            image_id: self.image_id,
            image: Arc::new(image),
            saved,
            next_instance_id: self.next_instance_id,
            active_backend: self.active_backend,
        })
    }
}

/// Writes through a temporary file so a crash never leaves a torn session.
pub(crate) fn save(dir: &Path, session: &Session) -> Result<(), ServiceError> {
    let body = serde_json::to_vec(&SessionFile::from_session(session)?).map_err(err)?;
    let tmp = dir.join(format!(".{}.json.tmp", session.image_id));
    fs::write(&tmp, body)?;
    fs::rename(&tmp, dir.join(format!("{}.json", session.image_id)))?;
    Ok(())
}

pub(crate) fn load_all(dir: &Path) -> Result<Vec<Session>, ServiceError> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let file: SessionFile = serde_json::from_slice(&fs::read(&p)?).map_err(|e| err(format!("{}: {e}", p.display())))?;
            file.into_session()
        })
        .collect()
}
