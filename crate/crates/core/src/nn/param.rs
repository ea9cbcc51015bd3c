use ndarray::ArrayD;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Callback used to walk named parameters and buffers of a model.
///
/// `param` is called for trainable tensors, `buffer` for state such as
/// batch-norm running statistics that is saved but not optimized.
pub trait ParamVisitor {
    fn param(&mut self, name: &str, p: &mut Param);
    fn buffer(&mut self, _name: &str, _b: &mut ArrayD<f32>) {}
}
