use crate::element::Element;
use crate::tensor::Tensor;

impl<T: Element> Tensor<T> {
    /// Sum of all elements, accumulated sequentially in storage order.
    pub fn sum(&self) -> Tensor<T> {
        let mut s = T::zero();
        for &v in self.data() {
            s += v;
        }
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |args| vec![Some(vec![args.grad[0]; n])]),
        )
    }

    /// Arithmetic mean of all elements.
    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let mut s = T::zero();
        for &v in self.data() {
            s += v;
        }
        let inv = T::one() / T::lit(n as f64);
        Tensor::from_op(
            "mean",
            vec![1],
            vec![s * inv],
            vec![self.clone()],
            Box::new(move |args| vec![Some(vec![args.grad[0] * inv; n])]),
        )
    }
}
