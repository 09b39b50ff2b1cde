//! Group operations built from point-to-point messages.
//!
//! Groups are slices of worker ids. Every member must call the same
//! collective with the same group, root, and tag. Summations are carried out
//! in ascending order of position within the group.

use super::{Endpoint, FabricError, Tag, WorkerId};
use crate::tensor::Tensor;

impl Endpoint {
    fn position(&self, group: &[WorkerId]) -> Result<usize, FabricError> {
        group
            .iter()
            .position(|&w| w == self.id)
            .ok_or(FabricError::NotInGroup { worker: self.id })
    }

    /// Sum of every member's tensor, delivered to `root` only.
    ///
    /// Non-root members send one message each; the root adds contributions
    /// in group order (its own at its position).
    pub async fn reduce_to_root(
        &self,
        group: &[WorkerId],
        root: WorkerId,
        t: Tensor,
        tag: impl Into<Tag>,
    ) -> crate::Result<Option<Tensor>> {
        let tag = tag.into();
        self.position(group)?;
        if self.id != root {
            self.send(root, tag, t)?;
            return Ok(None);
        }
        let mut own = Some(t);
        let mut acc: Option<Tensor> = None;
        for &w in group {
            let term = if w == root {
                own.take().expect("root appears once in group")
            } else {
                self.recv(w, tag).await?
            };
            match acc.as_mut() {
                None => acc = Some(term),
                Some(a) => a.add_assign(&term)?,
            }
        }
        Ok(acc)
    }

    /// `root` sends its tensor to every other member; all return it.
    pub async fn broadcast_from_root(
        &self,
        group: &[WorkerId],
        root: WorkerId,
        t: Option<Tensor>,
        tag: impl Into<Tag>,
    ) -> crate::Result<Tensor> {
        let tag = tag.into();
        self.position(group)?;
        if self.id == root {
            let t = t.ok_or_else(|| crate::Error::config("broadcast root supplied no tensor"))?;
            for &w in group.iter().filter(|&&w| w != root) {
                self.send(w, tag, t.clone())?;
            }
            Ok(t)
        } else {
            Ok(self.recv(root, tag).await?)
        }
    }

    /// Every member receives every member's tensor, in group order.
    pub async fn all_gather(&self, group: &[WorkerId], t: Tensor, tag: impl Into<Tag>) -> crate::Result<Vec<Tensor>> {
        let tag = tag.into();
        let me = self.position(group)?;
        for &w in group.iter().filter(|&&w| w != self.id) {
            self.send(w, tag, t.clone())?;
        }
        let mut own = Some(t);
        let mut out = Vec::with_capacity(group.len());
        for (i, &w) in group.iter().enumerate() {
            if i == me {
                out.push(own.take().expect("own slot visited once"));
            } else {
                out.push(self.recv(w, tag).await?);
            }
        }
        Ok(out)
    }

    /// `parts[k]` is this member's contribution to member `k`'s result; each
    /// member returns the group-ordered sum of the parts addressed to it.
    pub async fn reduce_scatter(&self, group: &[WorkerId], parts: Vec<Tensor>, tag: impl Into<Tag>) -> crate::Result<Tensor> {
        let tag = tag.into();
        let me = self.position(group)?;
        if parts.len() != group.len() {
            return Err(crate::Error::config(format!(
                "reduce_scatter needs {} parts, got {}",
                group.len(),
                parts.len()
            )));
        }
        let mut own = None;
        for (k, p) in parts.into_iter().enumerate() {
            if k == me {
                own = Some(p);
            } else {
                self.send(group[k], tag, p)?;
            }
        }
        let mut acc: Option<Tensor> = None;
        for (i, &w) in group.iter().enumerate() {
            let term = if i == me {
                own.take().expect("own part present")
            } else {
                self.recv(w, tag).await?
            };
            match acc.as_mut() {
                None => acc = Some(term),
                Some(a) => a.add_assign(&term)?,
            }
        }
        Ok(acc.expect("group is non-empty"))
    }
}
