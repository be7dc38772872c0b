use super::fabric::{Fabric, Payload};
use crate::cost::{CommTag, Primitive};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Stack per-device row bands (in device order) into the full map.
pub fn assemble_rows(parts: &[std::sync::Arc<Payload>]) -> Result<Tensor> {
    let tensors: Vec<Tensor> = parts
        .iter()
        .map(|p| p.activation().cloned())
        .collect::<Result<_>>()?;
    Tensor::concat_rows(&tensors)
}

/// A posted gather whose result has not been collected yet.
#[derive(Debug)]
#[must_use = "a pending gather must be waited on"]
pub struct PendingGather {
    pub tag: CommTag,
    pub device: usize,
}

impl PendingGather {
    /// Block until every peer's band for this tag has arrived. Also reports
    /// whether the call actually had to block.
    pub fn wait(self, fabric: &Fabric) -> Result<(Tensor, bool)> {
        let (parts, blocked) = fabric.recv_all(self.tag, self.device)?;
        Ok((assemble_rows(&parts)?, blocked))
    }
}

#[derive(Debug)]
pub enum Gathered {
    Full(Tensor),
    Pending(PendingGather),
}

/// Row-band AllGather. Every device must call with the same tag. `sync`
/// returns the assembled map; otherwise the post returns immediately and the
/// result is collected later through the handle.
pub fn collective_all_gather(
    fabric: &Fabric,
    device: usize,
    patch: &Tensor,
    tag: CommTag,
    sync: bool,
) -> Result<Gathered> {
    fabric.broadcast(tag, device, Payload::Activation(patch.clone()))?;
    let pending = PendingGather { tag, device };
    if sync {
        Ok(Gathered::Full(pending.wait(fabric)?.0))
    } else {
        Ok(Gathered::Pending(pending))
    }
}

/// Synchronously swap `halo_rows` boundary rows with the neighbouring bands.
/// Returns `(top, bottom)`; image edges get zero rows.
pub fn halo_exchange(
    fabric: &Fabric,
    device: usize,
    patch: &Tensor,
    halo_rows: usize,
    step: usize,
    layer: usize,
) -> Result<(Tensor, Tensor)> {
    let n = fabric.devices();
    let [b, c, h, w] = patch.dims();
    if halo_rows > h {
        return Err(shape_err!("halo of {halo_rows} rows from a {h}-row patch"));
    }
    let up = CommTag { step, layer, primitive: Primitive::Halo };
    // Distinct tag per direction so a device's two sends to one peer (N=2) never collide.
    let down = CommTag { layer: layer | (1 << 32), ..up };
    if device > 0 {
        fabric.send(up, device, device - 1, Payload::Activation(patch.slice_rows(0, halo_rows)?).into())?;
    }
    if device + 1 < n {
        fabric.send(down, device, device + 1, Payload::Activation(patch.slice_rows(h - halo_rows, h)?).into())?;
    }
    let zeros = || Tensor::zeros([b, c, halo_rows, w]);
    let top = if device > 0 {
        let (p, _) = fabric.recv(down, device, &[device - 1])?;
        p[0].activation()?.clone()
    } else {
        zeros()
    };
    let bottom = if device + 1 < n {
        let (p, _) = fabric.recv(up, device, &[device + 1])?;
        p[0].activation()?.clone()
    } else {
        zeros()
    };
    Ok((top, bottom))
}
