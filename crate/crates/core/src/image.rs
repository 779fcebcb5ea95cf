//! 8-bit images with binary PPM (P6) / PGM (P5) I/O.
//!
//! Pixel intensities are reals in `[0, 1]` stored at 1/255 resolution, so a
//! rendered frame survives a round trip through an archive unchanged.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 || data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "{height}x{width}x{channels} image needs {} bytes, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Self {
        Image { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Quantizes a real intensity, clamping to `[0, 1]`.
    pub fn quantize(v: f64) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c] as f64 / 255.0
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = Image::quantize(v);
    }

    /// `(H, W, C)` tensor of intensities in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.height, self.width, self.channels],
            self.data.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// Channel-wise concatenation `[self; other]` as an `(H, W, C1 + C2)` tensor.
    pub fn concat_channels(&self, other: &Image) -> Result<Tensor> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                "concat_channels",
                format!("{}x{} vs {}x{}", self.height, self.width, other.height, other.width),
            ));
        }
        let c = self.channels + other.channels;
        let mut data = Vec::with_capacity(self.height * self.width * c);
        for p in 0..self.height * self.width {
            let a = &self.data[p * self.channels..(p + 1) * self.channels];
            let b = &other.data[p * other.channels..(p + 1) * other.channels];
            data.extend(a.iter().chain(b).map(|&v| v as f64 / 255.0));
        }
        Ok(Tensor::from_parts(vec![self.height, self.width, c], data))
    }

    /// Writes P6 for RGB images and P5 for grayscale.
    pub fn write_pnm<W: Write>(&self, mut w: W) -> Result<()> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        write!(w, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_pnm<R: BufRead>(mut r: R) -> Result<Self> {
        let mut header = Vec::new();
        let mut fields = Vec::new();
        // magic, width, height, maxval separated by whitespace; '#' comments allowed
        while fields.len() < 4 {
            header.clear();
            let n = r.read_until(b'\n', &mut header)?;
            if n == 0 {
                return Err(Error::Format("truncated PNM header".into()));
            }
            let line = String::from_utf8_lossy(&header);
            let line = line.split('#').next().unwrap_or("");
            fields.extend(line.split_whitespace().map(str::to_string));
        }
        if fields.len() != 4 {
            return Err(Error::Format("PNM header must end after maxval".into()));
        }
        let channels = match fields[0].as_str() {
            "P6" => 3,
            "P5" => 1,
            m => return Err(Error::Format(format!("unsupported PNM magic {m}"))),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM field {s}")));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("PNM maxval {maxval} unsupported")));
        }
        let mut data = vec![0u8; width * height * channels];
        r.read_exact(&mut data)?;
        Image::new(height, width, channels, data)
    }
}
