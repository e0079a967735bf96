use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

const EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "ppm", "pgm", "pnm", "pbm"];

/// Last run of digits in the file stem, e.g. `frame_012.png` → 12.
fn frame_number(path: &Path) -> Option<u128> {
    let stem = path.file_stem()?.to_str()?;
    let end = stem.rfind(|c: char| c.is_ascii_digit())? + 1;
    let start = stem[..end].rfind(|c: char| !c.is_ascii_digit()).map_or(0, |i| i + 1);
    stem[start..end].parse().ok()
}

fn numeric_order(a: &Path, b: &Path) -> Ordering {
    match (frame_number(a), frame_number(b)) {
        (Some(x), Some(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => a.cmp(b),
    }
}

/// Image files of a directory in numeric frame order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        bail!("input {} is not a directory", dir.display());
    }
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    frames.sort_by(|a, b| numeric_order(a, b));
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorts_numerically_not_lexically() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["f10.png", "f2.png", "f1.png", "notes.txt", "cover.png"] {
            std::fs::write(dir.path().join(name), b"").unwrap();
        }
        let names: Vec<String> =
            list_frames(dir.path()).unwrap().iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["f1.png", "f2.png", "f10.png", "cover.png"]);
    }

    #[test]
    fn frame_numbers() {
        assert_eq!(frame_number(Path::new("a/frame_0012.png")), Some(12));
        assert_eq!(frame_number(Path::new("cam2_take_7.jpg")), Some(7));
        assert_eq!(frame_number(Path::new("x.png")), None);
    }

    #[test]
    fn missing_directory_is_an_error() {
        assert!(list_frames(Path::new("/definitely/not/here")).is_err());
    }
}
