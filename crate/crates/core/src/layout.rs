//! Token-grid arithmetic shared by every stage of the model.
//!
//! A sequence of `N = N_c + N_p` frames of `H x W` pixels is cut into
//! `P x P` patches. Tokens are numbered frame-major, then row-major over the
//! patch grid: `frame * L + row * (W / P) + col`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenLayout {
    pub context_frames: usize,
    pub future_frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl TokenLayout {
    /// Layout with a single future frame, the usual setting.
    pub fn new(context_frames: usize, height: usize, width: usize, patch: usize) -> Self {
        TokenLayout {
            context_frames,
            future_frames: 1,
            height,
            width,
            patch,
        }
    }

    pub fn frames(&self) -> usize {
        self.context_frames + self.future_frames
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch
    }

    /// `L`, the number of patch tokens per frame.
    pub fn tokens_per_frame(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// `N * L`.
    pub fn total_tokens(&self) -> usize {
        self.frames() * self.tokens_per_frame()
    }

    /// `N_p * L`, the number of maskable tokens.
    pub fn future_tokens(&self) -> usize {
        self.future_frames * self.tokens_per_frame()
    }

    /// Index of the first future-frame token.
    pub fn first_future_token(&self) -> usize {
        self.context_frames * self.tokens_per_frame()
    }

    pub fn pixels_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn patch_area(&self) -> usize {
        self.patch * self.patch
    }

    /// Structural problems with the layout, one message per broken constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.context_frames == 0 {
            out.push("layout.context_frames: must be >= 1".to_string());
        }
        if self.future_frames == 0 {
            out.push("layout.future_frames: must be >= 1".to_string());
        }
        if self.patch == 0 {
            out.push("layout.patch: must be >= 1".to_string());
            return out;
        }
        if self.height == 0 || !self.height.is_multiple_of(self.patch) {
            out.push(format!(
                "layout.height: {} must be a positive multiple of patch {}",
                self.height, self.patch
            ));
        }
        if self.width == 0 || !self.width.is_multiple_of(self.patch) {
            out.push(format!(
                "layout.width: {} must be a positive multiple of patch {}",
                self.width, self.patch
            ));
        }
        out
    }

    pub fn token_index(&self, frame: usize, row: usize, col: usize) -> Result<usize> {
        if frame >= self.frames() || row >= self.grid_rows() || col >= self.grid_cols() {
            return Err(Error::range(
                "token coordinates",
                format!(
                    "({frame}, {row}, {col}) outside {}x{}x{} grid",
                    self.frames(),
                    self.grid_rows(),
                    self.grid_cols()
                ),
            ));
        }
        Ok(frame * self.tokens_per_frame() + row * self.grid_cols() + col)
    }

    /// Inverse of [`TokenLayout::token_index`].
    pub fn token_coords(&self, token: usize) -> Result<(usize, usize, usize)> {
        if token >= self.total_tokens() {
            return Err(Error::range(
                "token index",
                format!("{token} >= {}", self.total_tokens()),
            ));
        }
        let per_frame = self.tokens_per_frame();
        let within = token % per_frame;
        Ok((
            token / per_frame,
            within / self.grid_cols(),
            within % self.grid_cols(),
        ))
    }

    /// Token (within its frame) covering pixel `(y, x)`.
    pub fn token_of_pixel(&self, y: usize, x: usize) -> usize {
        (y / self.patch) * self.grid_cols() + x / self.patch
    }
}
