use crate::error::{Error, Result};
use crate::numerics::kernels::Conv2dGeom;

/// One convolution stage of the patch stem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl StemStage {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self { channels, kernel, stride }
    }

    /// Same-style padding for overlapping kernels, none for patchifying ones.
    pub fn pad(&self) -> usize {
        if self.kernel > self.stride {
            (self.kernel - 1) / 2
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeMansiaConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub n_classes: usize,
    pub n_state: usize,
    pub in_channels: usize,
    pub conv_stem: [StemStage; 4],
}

pub const PRESETS: [&str; 5] = ["micro", "tiny", "tiny384", "small", "small384"];

/// Splits `patch` into four stride factors, largest prime factors last.
pub fn stride_schedule(patch: usize) -> Result<[usize; 4]> {
    if patch == 0 {
        return Err(Error::Config("patch_size must be positive".into()));
    }
    let mut factors = Vec::new();
    let (mut rest, mut f) = (patch, 2);
    while rest > 1 {
        while rest % f == 0 {
            factors.push(f);
            rest /= f;
        }
        f += 1;
    }
    while factors.len() > 4 {
        let a = factors.remove(0);
        let b = factors.remove(0);
        factors.push(a * b);
        factors.sort_unstable();
    }
    let mut out = [1; 4];
    out[..factors.len()].copy_from_slice(&factors);
    Ok(out)
}

/// Kernel-3 stages with widths `d/8, d/4, d/2, d`.
pub fn default_stem(d_model: usize, patch: usize) -> Result<[StemStage; 4]> {
    let s = stride_schedule(patch)?;
    let w = [(d_model / 8).max(1), (d_model / 4).max(1), (d_model / 2).max(1), d_model];
    Ok(std::array::from_fn(|i| StemStage::new(w[i], 3, s[i])))
}

/// Deep stem with a 7×7 entry convolution and a patchifying projection.
fn wide_stem(d_model: usize, patch: usize) -> [StemStage; 4] {
    [
        StemStage::new(64, 7, 2),
        StemStage::new(64, 3, 1),
        StemStage::new(64, 3, 1),
        StemStage::new(d_model, patch / 2, patch / 2),
    ]
}

impl DeMansiaConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let table = |d_model, image_size| Self {
            d_model,
            n_layers: 24,
            image_size,
            patch_size: 16,
            n_classes: 1000,
            n_state: 16,
            in_channels: 3,
            conv_stem: wide_stem(d_model, 16),
        };
        match name {
            "micro" => Ok(Self::micro()),
            "tiny" => Ok(table(192, 224)),
            "tiny384" => Ok(table(192, 384)),
            "small" => Ok(table(384, 224)),
            "small384" => Ok(table(384, 384)),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected one of {})", PRESETS.join(", ")))),
        }
    }

    pub fn micro() -> Self {
        Self {
            d_model: 32,
            n_layers: 4,
            image_size: 32,
            patch_size: 4,
            n_classes: 10,
            n_state: 16,
            in_channels: 3,
            conv_stem: default_stem(32, 4).expect("valid patch"),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens `J`.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Position of the class token: the middle of the sequence, rounding down.
    pub fn cls_index(&self) -> usize {
        self.n_patches() / 2
    }

    pub fn d_inner(&self) -> usize {
        crate::blocks::EXPAND * self.d_model
    }

    /// Geometry of every stem stage, checked against the image size.
    pub fn stem_geometry(&self) -> Result<Vec<Conv2dGeom>> {
        let (mut size, mut in_ch) = (self.image_size, self.in_channels);
        let mut out = Vec::with_capacity(4);
        for (i, st) in self.conv_stem.iter().enumerate() {
            if st.kernel == 0 || st.stride == 0 || st.channels == 0 {
                return Err(Error::Config(format!("stem stage {i} has a zero entry")));
            }
            if size + 2 * st.pad() < st.kernel {
                return Err(Error::Config(format!("stem stage {i} kernel {} exceeds input {size}", st.kernel)));
            }
            let g = Conv2dGeom {
                height: size,
                width: size,
                in_ch,
                out_ch: st.channels,
                kernel: st.kernel,
                stride: st.stride,
                pad: st.pad(),
            };
            size = g.out_height();
            in_ch = st.channels;
            out.push(g);
        }
        if size != self.grid() {
            return Err(Error::Config(format!(
                "stem maps {0}x{0} images to a {size}x{size} grid, expected {1}x{1}",
                self.image_size,
                self.grid()
            )));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("n_state", self.n_state),
            ("in_channels", self.in_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        let product: usize = self.conv_stem.iter().map(|s| s.stride).product();
        if product != self.patch_size {
            return Err(Error::Config(format!(
                "stem stride product {product} differs from patch_size {}",
                self.patch_size
            )));
        }
        if self.conv_stem[3].channels != self.d_model {
            return Err(Error::Config(format!(
                "last stem stage has {} channels, expected d_model = {}",
                self.conv_stem[3].channels, self.d_model
            )));
        }
        self.stem_geometry().map(|_| ())
    }
}
