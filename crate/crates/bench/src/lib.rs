//! Fixtures shared by the benchmarks.

use nbmcts_core::gateway::Message;
use nbmcts_core::util::stable_hash64;
use nbmcts_core::{NodeId, SearchConfig, SearchTree, TurnParse};

/// An all-open tree of `size` nodes with hash-derived shape and statistics.
pub fn wide_tree(size: usize, c_puct: f64) -> SearchTree {
    let mut cfg = SearchConfig::inference();
    cfg.c_puct = c_puct;
    cfg.max_depth = 64;
    let mut t = SearchTree::new("bench", vec![Message::user("q")], cfg, 0);
    let turn = TurnParse::code("t", "x = 1");
    let mut i = 0u64;
    while t.len() < size {
        i += 1;
        let h = stable_hash64([i.to_le_bytes().as_slice()]);
        let parent = NodeId((h % t.len() as u64) as usize);
        if t.node(parent).unwrap().depth >= 60 {
            continue;
        }
        let id = t.attach_child(parent, &turn, 1.0 / 3.0).unwrap();
        let v = ((h >> 16) % 2001) as f64 / 1000.0 - 1.0;
        t.backpropagate(id, v).unwrap();
    }
    t
}

pub const TURNS: &[&str] = &[
    "Thought: Load the data and look at it.\nAction: ```python\nimport pandas as pd\ndf = pd.read_csv('data.csv')\nprint(df.describe())\n```",
    "Thought: I have everything.\nFormatted answer: @mean[2.50] @rows[10] @names[['a', 'b']]",
    "I am not sure what to do next, maybe look at the columns?",
];
