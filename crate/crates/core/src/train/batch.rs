use rand::Rng;

use crate::aux::{aux_values, AuxConfig};
use crate::data::Image;
use crate::denoise::DenoiserSpec;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::stage_rng;
use crate::tensor::{Scalar, Tensor};

/// Where `D(ŷ)` comes from during refiner training.
#[derive(Clone, Copy, Debug)]
pub enum TargetSource<'a> {
    /// A built-in filter, re-run on every fresh `ŷ`.
    Builtin(&'a DenoiserSpec),
    /// Fixed outputs aligned with the training images (external tools).
    Fixed(&'a [Image]),
}

/// One training batch of `[N,1,c,c]` crops.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    pub yhat: Tensor<F>,
    pub z: Tensor<F>,
    /// `D(ŷ)` crops; empty when no target was requested.
    pub target: Option<Tensor<F>>,
}

pub(crate) fn check_crop(images: &[Image], crop: usize) -> Result<()> {
    if images.is_empty() {
        return Err(Error::config("empty training set"));
    }
    if crop == 0 {
        return Err(Error::config("crop must be positive"));
    }
    if let Some(img) = images.iter().find(|i| i.height() < crop || i.width() < crop) {
        return Err(Error::config(format!(
            "crop {crop} exceeds a {}x{} image",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

struct Item {
    yhat: Vec<f64>,
    z: Vec<f64>,
    target: Option<Vec<f64>>,
}

fn crop_vec(data: &[f64], width: usize, r: usize, c: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for i in r..r + size {
        out.extend_from_slice(&data[i * width + c..i * width + c + size]);
    }
    out
}

/// Draws `batch` random crops with fresh auxiliary samples. Item `i` of step
/// `step` uses its own stream, so results do not depend on thread count.
#[allow(clippy::too_many_arguments)]
pub fn sample_batch<F: Scalar>(
    images: &[Image],
    aux: &AuxConfig,
    targets: Option<TargetSource<'_>>,
    crop: usize,
    batch: usize,
    seed: u64,
    stage: &str,
    step: usize,
) -> Result<Batch<F>> {
    check_crop(images, crop)?;
    if let Some(TargetSource::Fixed(t)) = targets {
        if t.len() != images.len() {
            return Err(Error::config(format!(
                "{} denoiser outputs for {} images",
                t.len(),
                images.len()
            )));
        }
    }
    let items = parallel::map_indices(batch, |i| -> Result<Item> {
        let mut rng = stage_rng(seed, stage, (step * batch + i) as u64);
        let idx = rng.random_range(0..images.len());
        let img = &images[idx];
        let r = rng.random_range(0..=img.height() - crop);
        let c = rng.random_range(0..=img.width() - crop);
        let (yhat, z, _) = aux_values(img.data(), img.levels(), aux, &mut rng);
        let target = match targets {
            None => None,
            Some(TargetSource::Builtin(spec)) => {
                let yh = Image::new(img.height(), img.width(), yhat.clone(), None)?;
                Some(crop_vec(spec.apply(&yh)?.data(), img.width(), r, c, crop))
            }
            Some(TargetSource::Fixed(t)) => {
                if t[idx].dims() != img.dims() {
                    return Err(Error::shape(format!(
                        "denoiser output {:?} vs image {:?}",
                        t[idx].dims(),
                        img.dims()
                    )));
                }
                Some(crop_vec(t[idx].data(), img.width(), r, c, crop))
            }
        };
        Ok(Item {
            yhat: crop_vec(&yhat, img.width(), r, c, crop),
            z: crop_vec(&z, img.width(), r, c, crop),
            target,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(stack(items, batch, crop))
}

fn stack<F: Scalar>(items: Vec<Item>, batch: usize, crop: usize) -> Batch<F> {
    let shape = [batch, 1, crop, crop];
    let cat = |f: &dyn Fn(&Item) -> &[f64]| -> Tensor<F> {
        let data = items
            .iter()
            .flat_map(|it| f(it).iter().map(|&v| F::from_f64_lossy(v)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("stacked crops")
    };
    let target = items
        .first()
        .and_then(|it| it.target.as_ref())
        .map(|_| cat(&|it| it.target.as_deref().unwrap_or(&[])));
    Batch {
        yhat: cat(&|it| &it.yhat),
        z: cat(&|it| &it.z),
        target,
    }
}

/// Whole-image tensor `[1,1,H,W]`.
pub fn image_tensor<F: Scalar>(img: &Image) -> Tensor<F> {
    Tensor::new(
        vec![1, 1, img.height(), img.width()],
        img.data().iter().map(|&v| F::from_f64_lossy(v)).collect(),
    )
    .expect("image shape")
}
