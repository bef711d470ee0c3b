//! Planar RGB/gray images in `[0, 1]` and binary PPM/PGM I/O.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::ndgrad::{Real, Tensor};

/// `C×H×W` planar image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::c(v as f64)).collect(),
        )
        .expect("image dimensions are positive")
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Bilinear resample of the pixel-space rectangle `[x1,x2]×[y1,y2]` to `out×out`.
    ///
    /// Sample points sit at pixel centres of the output grid mapped into the
    /// rectangle; reads outside the image clamp to the border.
    pub fn crop_resize(&self, x1: f64, y1: f64, x2: f64, y2: f64, out: usize) -> Image {
        let mut res = Image::new(self.channels, out, out);
        let sx = (x2 - x1) / out as f64;
        let sy = (y2 - y1) / out as f64;
        for oy in 0..out {
            let fy = (y1 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1i = (y0 + 1).min(self.height - 1);
            let ty = (fy - y0 as f64) as f32;
            for ox in 0..out {
                let fx = (x1 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1i = (x0 + 1).min(self.width - 1);
                let tx = (fx - x0 as f64) as f32;
                for c in 0..self.channels {
                    let a = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1i) * tx;
                    let b = self.get(c, y1i, x0) * (1.0 - tx) + self.get(c, y1i, x1i) * tx;
                    res.set(c, oy, ox, a * (1.0 - ty) + b * ty);
                }
            }
        }
        res
    }

    /// One-pixel rectangle outline in pixel coordinates, clipped to the image.
    pub fn draw_rect(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, color: &[f32]) {
        let cl = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi - 1);
        let (xa, xb) = (cl(x1, self.width), cl(x2 - 1.0, self.width));
        let (ya, yb) = (cl(y1, self.height), cl(y2 - 1.0, self.height));
        for c in 0..self.channels {
            let v = color[c.min(color.len() - 1)];
            for x in xa..=xb {
                self.set(c, ya, x, v);
                self.set(c, yb, x, v);
            }
            for y in ya..=yb {
                self.set(c, y, xa, v);
                self.set(c, y, xb, v);
            }
        }
    }

    fn to_bytes_interleaved(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    /// Binary PPM (P6) for 3 channels, PGM (P5) for 1.
    pub fn encode_pnm(&self) -> Vec<u8> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => panic!("PNM needs 1 or 3 channels, got {c}"),
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes_interleaved());
        out
    }

    pub fn save_pnm(&self, path: &Path) -> io::Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode_pnm())
    }

    pub fn decode_pnm(bytes: &[u8]) -> Result<Image, String> {
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PNM header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(format!("unsupported PNM magic {m}")),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad PNM header field {s}: {e}"));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        if width == 0 || height == 0 {
            return Err("empty image".into());
        }
        let n = width * height * channels;
        let body = bytes
            .get(pos..pos + n)
            .ok_or_else(|| "truncated PNM body".to_string())?;
        let mut img = Image::new(channels, height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = body[(y * width + x) * channels + c] as f32 / maxval as f32;
                    img.set(c, y, x, v);
                }
            }
        }
        Ok(img)
    }

    pub fn load_pnm(path: &Path) -> Result<Image, String> {
        let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::decode_pnm(&bytes).map_err(|e| format!("{}: {e}", path.display()))
    }
}
