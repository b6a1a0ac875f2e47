use std::fmt;

use crate::Element;

/// Axis order `(batch, channels, H, W, D)`. Planar maps carry `D = 1`.
pub type Shape = [usize; 5];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeError {
    pub expected: usize,
    pub actual: usize,
    pub shape: Shape,
}

impl fmt::Display for ShapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "shape {:?} needs {} elements but {} were supplied",
            self.shape, self.expected, self.actual
        )
    }
}

impl std::error::Error for ShapeError {}

/// Dense row-major tensor with a fixed five-axis shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &preview)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self { shape, data: vec![value; numel(&shape)] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: [1; 5], data: vec![value] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, ShapeError> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(ShapeError { expected, actual: data.len(), shape });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(Shape) -> T) -> Self {
        let mut data = Vec::with_capacity(numel(&shape));
        for b in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        for d in 0..shape[4] {
                            data.push(f([b, c, h, w, d]));
                        }
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn offset(&self, idx: Shape) -> usize {
        let s = self.shape;
        (((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * s[3] + idx[3]) * s[4] + idx[4]
    }

    pub fn at(&self, idx: Shape) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: Shape, value: T) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Same data, new shape with an identical element count.
    pub fn reshape(self, shape: Shape) -> Result<Self, ShapeError> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Converts element type, e.g. `f64` parameters into `f32`.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| U::of(v.as_f64())).collect() }
    }

    /// Extracts batch item `b` as a tensor with batch size 1.
    pub fn batch_item(&self, b: usize) -> Self {
        let per = numel(&self.shape) / self.shape[0];
        let mut shape = self.shape;
        shape[0] = 1;
        Self { shape, data: self.data[b * per..(b + 1) * per].to_vec() }
    }

    /// Stacks batch-1 tensors of identical shape along the batch axis.
    pub fn stack(items: &[Self]) -> Self {
        assert!(!items.is_empty(), "stack of nothing");
        let mut shape = items[0].shape;
        assert!(items.iter().all(|t| t.shape == shape), "stack shape mismatch");
        shape[0] = items.iter().map(|t| t.shape[0]).sum();
        let mut data = Vec::with_capacity(numel(&shape));
        for t in items {
            data.extend_from_slice(&t.data);
        }
        Self { shape, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_row_major_with_depth_fastest() {
        let t = Tensor::<f32>::from_fn([2, 3, 4, 5, 6], |[b, c, h, w, d]| {
            (b * 10000 + c * 1000 + h * 100 + w * 10 + d) as f32
        });
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.at([1, 2, 3, 4, 5]), 12345.0);
        assert_eq!(t.offset([0, 0, 0, 1, 0]), 6);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::<f32>::from_vec([1, 1, 2, 2, 1], vec![0.0; 3]).unwrap_err();
        assert_eq!(err.expected, 4);
        assert_eq!(err.actual, 3);
    }

    #[test]
    fn stack_and_batch_item_invert() {
        let a = Tensor::<f64>::full([1, 2, 2, 2, 1], 1.0);
        let b = Tensor::<f64>::full([1, 2, 2, 2, 1], 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]);
        assert_eq!(s.shape(), [2, 2, 2, 2, 1]);
        assert_eq!(s.batch_item(0), a);
        assert_eq!(s.batch_item(1), b);
    }
}
