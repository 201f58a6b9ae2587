//! Frame sources: image directories and raw RGB streams from an external
//! decoder process.

use std::collections::HashMap;
use std::io::{BufReader, ErrorKind, Read};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Stdio};

use crate::dataset::Dataset;

use super::{Frame, PipelineError};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Images in a directory, in file-name order.
#[derive(Debug, Clone)]
pub struct DirectoryFrames {
    entries: Vec<(u64, PathBuf)>,
    next: usize,
    interval_ms: f64,
}

impl DirectoryFrames {
    /// Lists image files. With `ids`, each file's frame id is the id of the
    /// dataset image with the same file name and unknown files are an error;
    /// otherwise frames are numbered from 1.
    pub fn open(dir: &Path, ids: Option<&Dataset>, interval_ms: f64) -> Result<Self, PipelineError> {
        let io_err = |source| PipelineError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err)?
            .map(|e| e.map(|e| e.path()).map_err(io_err))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();

        let by_name: Option<HashMap<&str, u64>> = ids.map(|d| {
            d.images
                .iter()
                .map(|i| {
                    let base = Path::new(&i.file_name)
                        .file_name()
                        .and_then(|n| n.to_str())
                        .unwrap_or(&i.file_name);
                    (base, i.id)
                })
                .collect()
        });
        let entries = files
            .into_iter()
            .enumerate()
            .map(|(i, path)| {
                let id = match &by_name {
                    None => i as u64 + 1,
                    Some(map) => {
                        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                        *map.get(name).ok_or_else(|| {
                            PipelineError::Source(format!(
                                "{} is not listed in the dataset",
                                path.display()
                            ))
                        })?
                    }
                };
                Ok((id, path))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Ok(Self {
            entries,
            next: 0,
            interval_ms,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = (u64, &Path)> {
        self.entries.iter().map(|(id, p)| (*id, p.as_path()))
    }
}

pub fn load_frame(id: u64, path: &Path, timestamp_ms: f64) -> Result<Frame, PipelineError> {
    let img = image::open(path).map_err(|source| PipelineError::Image {
        path: path.display().to_string(),
        source,
    })?;
    Frame::from_image(id, img.to_rgb8(), timestamp_ms)
}

impl Iterator for DirectoryFrames {
    type Item = Result<Frame, PipelineError>;

    fn next(&mut self) -> Option<Self::Item> {
        let (id, path) = self.entries.get(self.next)?;
        let ts = self.next as f64 * self.interval_ms;
        self.next += 1;
        Some(load_frame(*id, path, ts))
    }
}

/// Raw `rgb24` frames of a fixed size read from a decoder's stdout, e.g.
/// `ffmpeg -i clip.mp4 -f rawvideo -pix_fmt rgb24 -`.
pub struct DecoderFrames {
    child: Child,
    stdout: BufReader<ChildStdout>,
    width: u32,
    height: u32,
    next_id: u64,
    index: u64,
    interval_ms: f64,
    done: bool,
}

impl DecoderFrames {
    pub fn spawn(
        mut command: Command,
        width: u32,
        height: u32,
        first_id: u64,
        interval_ms: f64,
    ) -> Result<Self, PipelineError> {
        if width == 0 || height == 0 {
            return Err(PipelineError::Source(format!(
                "invalid decoder frame size {width}x{height}"
            )));
        }
        let mut child = command
            .stdout(Stdio::piped())
            .stdin(Stdio::null())
            .spawn()
            .map_err(|source| PipelineError::Io {
                path: format!("{:?}", command.get_program()),
                source,
            })?;
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            child,
            stdout,
            width,
            height,
            next_id: first_id,
            index: 0,
            interval_ms,
            done: false,
        })
    }
}

impl Iterator for DecoderFrames {
    type Item = Result<Frame, PipelineError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let n = self.width as usize * self.height as usize * 3;
        let mut buf = vec![0u8; n];
        let mut filled = 0;
        while filled < n {
            match self.stdout.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(k) => filled += k,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => {
                    self.done = true;
                    return Some(Err(PipelineError::Source(format!("decoder read failed: {e}"))));
                }
            }
        }
        if filled == 0 {
            self.done = true;
            return None;
        }
        if filled < n {
            self.done = true;
            return Some(Err(PipelineError::Source(format!(
                "decoder stream ended inside a frame ({filled} of {n} bytes)"
            ))));
        }
        let id = self.next_id;
        let ts = self.index as f64 * self.interval_ms;
        self.next_id += 1;
        self.index += 1;
        Some(Frame::new(id, self.width, self.height, buf, ts))
    }
}

impl Drop for DecoderFrames {
    fn drop(&mut self) {
        if !self.done {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}
