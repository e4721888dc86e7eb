//! Binary masks and per-frame instance mask sets.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

pub type InstanceId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::MalformedMask(format!(
                "expected {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Mask with exactly the given row-major pixel indices set.
    pub fn from_indices(width: usize, height: usize, indices: &[usize]) -> Result<Self> {
        let mut m = Self::zeros(width, height);
        for &i in indices {
            if i >= m.data.len() {
                return Err(Error::InvalidArgument(format!(
                    "pixel index {i} out of range for {width}x{height}"
                )));
            }
            m.data[i] = true;
        }
        Ok(m)
    }

    /// Axis-aligned rectangle `[x0, x0+w) × [y0, y0+h)`, clipped to the frame.
    pub fn rect(width: usize, height: usize, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self::from_fn(width, height, |x, y| {
            x >= x0 && x < x0 + w && y >= y0 && y < y0 + h
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at(&self, idx: usize) -> bool {
        self.data[idx]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn pixel_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn intersect(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        check_dims(self.dims(), other.dims())?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Inclusive bounding box `(x_min, y_min, x_max, y_max)`.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for i in self.indices() {
            let (x, y) = (i % self.width, i / self.width);
            bb = Some(match bb {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        bb
    }

    /// Keeps set pixels whose four neighbours are all set. Pixels on the
    /// frame border count as unset.
    pub fn erode(&self) -> BinaryMask {
        let (w, h) = (self.width, self.height);
        BinaryMask::from_fn(w, h, |x, y| {
            x > 0
                && y > 0
                && x + 1 < w
                && y + 1 < h
                && self.get(x, y)
                && self.get(x - 1, y)
                && self.get(x + 1, y)
                && self.get(x, y - 1)
                && self.get(x, y + 1)
        })
    }

    /// Mean pixel coordinate `(u, v)` of set pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
        for i in self.indices() {
            su += (i % self.width) as f64;
            sv += (i / self.width) as f64;
            n += 1;
        }
        (n > 0).then(|| (su / n as f64, sv / n as f64))
    }
}

/// Union of any number of equally-shaped masks. An empty list yields all zeros.
pub fn mask_union(masks: &[&BinaryMask], width: usize, height: usize) -> Result<BinaryMask> {
    let mut out = BinaryMask::zeros(width, height);
    for m in masks {
        check_dims((width, height), m.dims())?;
        for (o, &b) in out.data.iter_mut().zip(&m.data) {
            *o |= b;
        }
    }
    Ok(out)
}

pub fn mask_complement(mask: &BinaryMask) -> BinaryMask {
    mask.complement()
}

pub fn mask_intersect(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    a.intersect(b)
}

pub fn pixel_count(mask: &BinaryMask) -> usize {
    mask.pixel_count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: InstanceId,
    pub mask: BinaryMask,
}

/// Labelled, pairwise-disjoint binary masks for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMaskSet {
    width: usize,
    height: usize,
    instances: Vec<Instance>,
}

impl InstanceMaskSet {
    pub fn new(width: usize, height: usize, instances: Vec<(InstanceId, BinaryMask)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut owner = vec![0 as InstanceId; width * height];
        let mut out = Vec::with_capacity(instances.len());
        for (id, mask) in instances {
            if id == 0 {
                return Err(Error::MalformedMask("instance id 0 is reserved".into()));
            }
            if !seen.insert(id) {
                return Err(Error::MalformedMask(format!("duplicate instance id {id}")));
            }
            check_dims((width, height), mask.dims())?;
            for i in mask.indices() {
                if owner[i] != 0 {
                    return Err(Error::MalformedMask(format!(
                        "pixel {i} claimed by instances {} and {id}",
                        owner[i]
                    )));
                }
                owner[i] = id;
            }
            out.push(Instance { id, mask });
        }
        Ok(Self {
            width,
            height,
            instances: out,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            instances: Vec::new(),
        }
    }

    /// Decode a label map where 0 is background and `n` is instance `n`.
    /// Instances are ordered by ascending id.
    pub fn from_label_map(width: usize, height: usize, labels: &[InstanceId]) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::MalformedMask(format!(
                "label map expects {} pixels, got {}",
                width * height,
                labels.len()
            )));
        }
        let ids: BTreeSet<InstanceId> = labels.iter().copied().filter(|&l| l != 0).collect();
        let instances = ids
            .into_iter()
            .map(|id| {
                let data = labels.iter().map(|&l| l == id).collect();
                (id, BinaryMask::new(width, height, data).unwrap())
            })
            .collect();
        Self::new(width, height, instances)
    }

    pub fn label_map(&self) -> Vec<InstanceId> {
        let mut labels = vec![0; self.width * self.height];
        for inst in &self.instances {
            for i in inst.mask.indices() {
                labels[i] = inst.id;
            }
        }
        labels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn ids(&self) -> Vec<InstanceId> {
        self.instances.iter().map(|i| i.id).collect()
    }

    pub fn get(&self, id: InstanceId) -> Option<&BinaryMask> {
        self.instances.iter().find(|i| i.id == id).map(|i| &i.mask)
    }

    /// Union of all instance masks.
    pub fn union(&self) -> BinaryMask {
        let refs: Vec<&BinaryMask> = self.instances.iter().map(|i| &i.mask).collect();
        mask_union(&refs, self.width, self.height).expect("instance shapes validated")
    }

    /// Union of the masks whose id is in `ids`.
    pub fn union_of(&self, ids: &[InstanceId]) -> BinaryMask {
        let refs: Vec<&BinaryMask> = self
            .instances
            .iter()
            .filter(|i| ids.contains(&i.id))
            .map(|i| &i.mask)
            .collect();
        mask_union(&refs, self.width, self.height).expect("instance shapes validated")
    }

    /// Copy without the given instances.
    pub fn without(&self, ids: &[InstanceId]) -> InstanceMaskSet {
        InstanceMaskSet {
            width: self.width,
            height: self.height,
            instances: self
                .instances
                .iter()
                .filter(|i| !ids.contains(&i.id))
                .cloned()
                .collect(),
        }
    }

    /// Copy sorted by ascending id.
    pub fn sorted(&self) -> InstanceMaskSet {
        let mut out = self.clone();
        out.instances.sort_by_key(|i| i.id);
        out
    }
}
