use crate::error::{Error, Result};

/// Sorted set of admissible intensity levels.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSet {
    levels: Vec<f64>,
}

impl LevelSet {
    pub fn new(mut levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("level set must be non-empty and finite"));
        }
        levels.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        levels.dedup();
        Ok(LevelSet { levels })
    }

    /// `{0, 1/255, …, 1}`.
    pub fn eight_bit() -> Self {
        LevelSet {
            levels: (0..=255).map(|k| k as f64 / 255.0).collect(),
        }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn contains(&self, v: f64) -> bool {
        self.levels
            .binary_search_by(|l| l.partial_cmp(&v).unwrap_or(std::cmp::Ordering::Less))
            .is_ok()
    }

    /// Nearest level; an exact tie goes to the lower level.
    pub fn nearest(&self, v: f64) -> f64 {
        let l = &self.levels;
        let i = l.partition_point(|&x| x < v);
        if i == 0 {
            return l[0];
        }
        if i == l.len() {
            return l[l.len() - 1];
        }
        let (lo, hi) = (l[i - 1], l[i]);
        if hi - v < v - lo {
            hi
        } else {
            lo
        }
    }

    pub fn union(&self, extra: &[f64]) -> Self {
        let mut v = self.levels.clone();
        v.extend_from_slice(extra);
        LevelSet::new(v).expect("finite levels")
    }
}

/// Grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
    levels: Option<LevelSet>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>, levels: Option<LevelSet>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} image with {} values",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::config(format!("intensity {bad} outside [0, 1]")));
        }
        if let Some(ls) = &levels {
            if let Some(bad) = data.iter().find(|v| !ls.contains(**v)) {
                return Err(Error::config(format!("intensity {bad} not in level set")));
            }
        }
        Ok(Image {
            height,
            width,
            data,
            levels,
        })
    }

    /// Continuous image from arbitrary values, clamped into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Image::new(height, width, data, None)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Image::new(height, width, vec![value; height * width], None)
    }

    /// 8-bit image; values are `k / 255`.
    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            height,
            width,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
            Some(LevelSet::eight_bit()),
        )
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Pixel with coordinates clamped to the image (replicate border).
    pub fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.data[r * self.width + c]
    }

    pub fn levels(&self) -> Option<&LevelSet> {
        self.levels.as_ref()
    }

    pub fn is_eight_bit(&self) -> bool {
        self.levels.as_ref() == Some(&LevelSet::eight_bit())
    }

    /// Copies out a `size_h × size_w` window starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size_h: usize, size_w: usize) -> Result<Image> {
        if row + size_h > self.height || col + size_w > self.width {
            return Err(Error::config(format!(
                "crop {size_h}x{size_w} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(size_h * size_w);
        for r in row..row + size_h {
            data.extend_from_slice(&self.data[r * self.width + col..r * self.width + col + size_w]);
        }
        Ok(Image {
            height: size_h,
            width: size_w,
            data,
            levels: self.levels.clone(),
        })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_level_rounding_and_ties() {
        let ls = LevelSet::new(vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(ls.nearest(0.74), 0.5);
        assert_eq!(ls.nearest(0.76), 1.0);
        assert_eq!(ls.nearest(0.25), 0.0);
        assert_eq!(ls.nearest(-3.0), 0.0);
        assert_eq!(ls.nearest(7.0), 1.0);
        assert_eq!(ls.nearest(0.5), 0.5);
    }

    #[test]
    fn validation() {
        assert!(Image::new(1, 2, vec![0.0, 1.1], None).is_err());
        assert!(Image::new(1, 2, vec![0.0], None).is_err());
        assert!(Image::new(1, 1, vec![0.3], Some(LevelSet::eight_bit())).is_err());
        assert!(Image::from_u8(1, 3, &[0, 128, 255]).unwrap().is_eight_bit());
    }

    #[test]
    fn crop_and_clamped_access() {
        let img = Image::new(3, 3, (0..9).map(|v| v as f64 / 8.0).collect(), None).unwrap();
        let c = img.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[4.0 / 8.0, 5.0 / 8.0, 7.0 / 8.0, 1.0]);
        assert_eq!(img.get_clamped(-5, 10), img.get(0, 2));
        assert!(img.crop(2, 2, 2, 2).is_err());
    }
}
