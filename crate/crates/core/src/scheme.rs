use crate::free_path::FreeCtx;
use crate::retired::RetiredObject;
use crate::timeline::Recorder;

/// A reclamation algorithm plugged into a [`Domain`](crate::Domain).
///
/// The domain owns registration, operation bracketing, the free policy and
/// the oracle; a scheme only decides when retired objects become safe. Every
/// hook runs on the owning thread, except `join`/`leave`/`collect`, which run
/// under the registration lock.
pub trait Scheme: Send + Sync + Sized + 'static {
    type Params: Clone + Default + Send + Sync + std::fmt::Debug;
    type Local: Send;

    fn new(max_threads: usize, params: &Self::Params) -> Self;

    fn name(&self) -> &'static str;

    /// False for schemes that never deallocate.
    fn reclaims(&self) -> bool {
        true
    }

    fn join<R: Recorder>(&self, tid: usize, ctx: &mut FreeCtx<'_, R>) -> Self::Local;

    /// Detaches `tid`, moving everything it still holds into `sink`.
    fn leave<R: Recorder>(
        &self,
        tid: usize,
        local: &mut Self::Local,
        sink: &mut Vec<RetiredObject>,
        ctx: &mut FreeCtx<'_, R>,
    );

    fn begin<R: Recorder>(&self, tid: usize, local: &mut Self::Local, ctx: &mut FreeCtx<'_, R>);

    /// Stores `obj` with this scheme's retire stamp.
    fn retire<R: Recorder>(
        &self,
        tid: usize,
        local: &mut Self::Local,
        obj: RetiredObject,
        ctx: &mut FreeCtx<'_, R>,
    );

    /// Runs after the thread has become quiescent.
    fn end<R: Recorder>(&self, tid: usize, local: &mut Self::Local, ctx: &mut FreeCtx<'_, R>);

    /// Moves every held object into `sink` (shutdown drain).
    fn collect(&self, local: &mut Self::Local, sink: &mut Vec<RetiredObject>);

    /// Objects held in limbo.
    fn held(&self, local: &Self::Local) -> usize;
}
