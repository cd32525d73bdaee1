//! Complex-valued tensor storage for frequency-domain features.

use super::Element;

/// Dense complex tensor: parallel real/imaginary buffers of equal length.
#[derive(Debug, Clone)]
pub struct ComplexTensor<E: Element> {
    shape: Vec<usize>,
    pub re: Vec<E>,
    pub im: Vec<E>,
}

impl<E: Element> ComplexTensor<E> {
    pub fn new(re: Vec<E>, im: Vec<E>, shape: &[usize]) -> Self {
        assert_eq!(re.len(), im.len(), "real/imag buffer length mismatch");
        assert_eq!(re.len(), shape.iter().product::<usize>());
        ComplexTensor {
            shape: shape.to_vec(),
            re,
            im,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        ComplexTensor {
            shape: shape.to_vec(),
            re: vec![E::zero(); n],
            im: vec![E::zero(); n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    /// Per-element magnitude.
    pub fn magnitude(&self) -> Vec<E> {
        self.re
            .iter()
            .zip(self.im.iter())
            .map(|(&r, &i)| (r * r + i * i).sqrt())
            .collect()
    }
}
