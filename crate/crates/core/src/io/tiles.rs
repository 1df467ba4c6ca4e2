use std::path::Path;

use image::RgbImage;

use super::IoError;

/// Edge length of the map tiles this toolkit is tuned for.
pub const TILE_SIZE: u32 = 256;

/// Loads a tile as 8-bit RGB. Tiles of other sizes load but log a warning.
pub fn read_tile(path: impl AsRef<Path>) -> Result<RgbImage, IoError> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| IoError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    if img.dimensions() != (TILE_SIZE, TILE_SIZE) {
        log::warn!(
            "{}: tile is {}x{}, expected {TILE_SIZE}x{TILE_SIZE}",
            path.display(),
            img.height(),
            img.width()
        );
    }
    Ok(img)
}

pub fn write_tile(img: &RgbImage, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| IoError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| IoError::Image {
            path: path.to_path_buf(),
            source,
        })
}
