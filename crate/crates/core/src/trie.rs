//! Prefix tree over action sequences, so that rollouts sharing a prefix are
//! simulated once.

use std::collections::HashMap;

use crate::primitives::DiscreteAction;

#[derive(Debug, Clone, Copy)]
pub(crate) struct TrieNode {
    /// `None` for the root.
    pub parent: Option<usize>,
    pub action: DiscreteAction,
    pub depth: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ActionTrie {
    pub nodes: Vec<TrieNode>,
    /// Node ids grouped by depth; `levels[0]` is the root.
    pub levels: Vec<Vec<usize>>,
    /// Terminal node of each inserted sequence, in insertion order.
    pub leaves: Vec<usize>,
}

impl ActionTrie {
    pub fn build<'a>(sequences: impl IntoIterator<Item = &'a [DiscreteAction]>) -> Self {
        let mut nodes = vec![TrieNode {
            parent: None,
            action: DiscreteAction(0),
            depth: 0,
        }];
        let mut children: HashMap<(usize, DiscreteAction), usize> = HashMap::new();
        let mut leaves = Vec::new();
        for seq in sequences {
            let mut cur = 0;
            for &a in seq {
                cur = *children.entry((cur, a)).or_insert_with(|| {
                    nodes.push(TrieNode {
                        parent: Some(cur),
                        action: a,
                        depth: nodes[cur].depth + 1,
                    });
                    nodes.len() - 1
                });
            }
            leaves.push(cur);
        }
        let max_depth = nodes.iter().map(|n| n.depth).max().unwrap_or(0);
        let mut levels = vec![Vec::new(); max_depth + 1];
        for (i, n) in nodes.iter().enumerate() {
            levels[n.depth].push(i);
        }
        Self { nodes, levels, leaves }
    }

    /// Node ids from the first step to `leaf`, root excluded.
    #[cfg(test)]
    pub fn path(&self, leaf: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes[leaf].depth);
        let mut cur = leaf;
        while let Some(p) = self.nodes[cur].parent {
            out.push(cur);
            cur = p;
        }
        out.reverse();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shares_prefixes() {
        let seqs: Vec<Vec<DiscreteAction>> = vec![
            vec![DiscreteAction(0), DiscreteAction(1)],
            vec![DiscreteAction(0), DiscreteAction(2)],
            vec![DiscreteAction(0), DiscreteAction(1)],
            vec![DiscreteAction(1)],
        ];
        let trie = ActionTrie::build(seqs.iter().map(|s| s.as_slice()));
        // root, 0, 0-1, 0-2, 1
        assert_eq!(trie.nodes.len(), 5);
        assert_eq!(trie.leaves[0], trie.leaves[2]);
        assert_eq!(trie.levels[1].len(), 2);
        assert_eq!(trie.levels[2].len(), 2);
        let path: Vec<DiscreteAction> = trie.path(trie.leaves[1]).iter().map(|n| trie.nodes[*n].action).collect();
        assert_eq!(path, seqs[1]);
    }
}
