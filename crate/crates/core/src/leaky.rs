//! Baseline that never reclaims: every retired object is leaked.

use crate::free_path::FreeCtx;
use crate::retired::RetiredObject;
use crate::scheme::Scheme;
use crate::timeline::Recorder;

#[derive(Debug, Default)]
pub struct Leaky;

impl Scheme for Leaky {
    type Params = ();
    type Local = ();

    fn new(_: usize, _: &()) -> Self {
        Leaky
    }

    fn name(&self) -> &'static str {
        "none"
    }

    fn reclaims(&self) -> bool {
        false
    }

    fn join<R: Recorder>(&self, _: usize, _: &mut FreeCtx<'_, R>) {}

    fn leave<R: Recorder>(
        &self,
        _: usize,
        _: &mut (),
        _: &mut Vec<RetiredObject>,
        _: &mut FreeCtx<'_, R>,
    ) {
    }

    fn begin<R: Recorder>(&self, _: usize, _: &mut (), _: &mut FreeCtx<'_, R>) {}

    fn retire<R: Recorder>(
        &self,
        _: usize,
        _: &mut (),
        obj: RetiredObject,
        ctx: &mut FreeCtx<'_, R>,
    ) {
        ctx.note_leak();
        std::mem::forget(obj);
    }

    fn end<R: Recorder>(&self, _: usize, _: &mut (), _: &mut FreeCtx<'_, R>) {}

    fn collect(&self, _: &mut (), _: &mut Vec<RetiredObject>) {}

    fn held(&self, _: &()) -> usize {
        0
    }
}
