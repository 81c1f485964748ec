//! Tile mazes: depth-first carving on an n x n cell lattice embedded in a
//! (2n+1) x (2n+1) wall grid, with optional braiding that opens a fraction
//! of dead ends so loops exist.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tile {
    Wall,
    Free,
}

#[derive(Debug, Clone)]
pub struct Maze {
    pub tiles_per_side: usize,
    tiles: Vec<Tile>,
}

impl Maze {
    /// Carve a perfect maze over `cells` x `cells` rooms, then open
    /// `braid` of the dead ends (0 keeps a tree, 1 removes all dead ends).
    pub fn generate(cells: usize, braid: f64, rng: &mut ChaCha8Rng) -> Maze {
        assert!(cells >= 2, "maze needs at least 2x2 cells");
        let n = 2 * cells + 1;
        let mut maze = Maze {
            tiles_per_side: n,
            tiles: vec![Tile::Wall; n * n],
        };
        for r in 0..cells {
            for c in 0..cells {
                maze.set(2 * r + 1, 2 * c + 1, Tile::Free);
            }
        }
        // Iterative depth-first search over rooms.
        let mut visited = vec![false; cells * cells];
        let mut stack = vec![(rng.gen_range(0..cells), rng.gen_range(0..cells))];
        visited[stack[0].0 * cells + stack[0].1] = true;
        while let Some(&(r, c)) = stack.last() {
            let mut nbrs: Vec<(usize, usize)> = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)]
                .iter()
                .filter_map(|&(dr, dc)| {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0 && nc >= 0 && (nr as usize) < cells && (nc as usize) < cells {
                        let (nr, nc) = (nr as usize, nc as usize);
                        (!visited[nr * cells + nc]).then_some((nr, nc))
                    } else {
                        None
                    }
                })
                .collect();
            if nbrs.is_empty() {
                stack.pop();
                continue;
            }
            nbrs.shuffle(rng);
            let (nr, nc) = nbrs[0];
            visited[nr * cells + nc] = true;
            maze.set(r + nr + 1, c + nc + 1, Tile::Free);
            stack.push((nr, nc));
        }
        if braid > 0.0 {
            maze.braid(cells, braid, rng);
        }
        maze
    }

    /// Open one wall next to each dead-end room, with the given probability.
    fn braid(&mut self, cells: usize, braid: f64, rng: &mut ChaCha8Rng) {
        for r in 0..cells {
            for c in 0..cells {
                let (tr, tc) = (2 * r + 1, 2 * c + 1);
                let mut walls: Vec<(usize, usize)> = Vec::new();
                let mut open = 0;
                for (dr, dc) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                    let (wr, wc) = (tr as i64 + dr, tc as i64 + dc);
                    let (wr, wc) = (wr as usize, wc as usize);
                    if self.tile(wr, wc) == Tile::Free {
                        open += 1;
                    } else if wr > 0
                        && wc > 0
                        && wr < self.tiles_per_side - 1
                        && wc < self.tiles_per_side - 1
                    {
                        walls.push((wr, wc));
                    }
                }
                if open == 1 && !walls.is_empty() && rng.gen_bool(braid) {
                    let &(wr, wc) = walls.choose(rng).expect("walls non-empty");
                    self.set(wr, wc, Tile::Free);
                }
            }
        }
    }

    pub fn tile(&self, row: usize, col: usize) -> Tile {
        if row >= self.tiles_per_side || col >= self.tiles_per_side {
            Tile::Wall
        } else {
            self.tiles[row * self.tiles_per_side + col]
        }
    }

    fn set(&mut self, row: usize, col: usize, t: Tile) {
        let n = self.tiles_per_side;
        self.tiles[row * n + col] = t;
    }

    pub fn is_wall(&self, row: i64, col: i64) -> bool {
        if row < 0 || col < 0 {
            return true;
        }
        self.tile(row as usize, col as usize) == Tile::Wall
    }

    pub fn free_tiles(&self) -> Vec<(usize, usize)> {
        let n = self.tiles_per_side;
        (0..n * n)
            .filter(|&i| self.tiles[i] == Tile::Free)
            .map(|i| (i / n, i % n))
            .collect()
    }

    /// Room tiles (odd, odd): natural spots for spawns and items.
    pub fn room_tiles(&self) -> Vec<(usize, usize)> {
        self.free_tiles()
            .into_iter()
            .filter(|&(r, c)| r % 2 == 1 && c % 2 == 1)
            .collect()
    }

    /// Breadth-first tile distances from a start tile; walls get usize::MAX.
    pub fn bfs_distances(&self, start: (usize, usize)) -> Vec<usize> {
        let n = self.tiles_per_side;
        let mut dist = vec![usize::MAX; n * n];
        if self.tile(start.0, start.1) == Tile::Wall {
            return dist;
        }
        let mut queue = std::collections::VecDeque::new();
        dist[start.0 * n + start.1] = 0;
        queue.push_back(start);
        while let Some((r, c)) = queue.pop_front() {
            let d = dist[r * n + c];
            for (dr, dc) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr as usize >= n || nc as usize >= n {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if self.tile(nr, nc) == Tile::Free && dist[nr * n + nc] == usize::MAX {
                    dist[nr * n + nc] = d + 1;
                    queue.push_back((nr, nc));
                }
            }
        }
        dist
    }

    /// All free tiles reachable from any single free tile.
    pub fn fully_connected(&self) -> bool {
        let free = self.free_tiles();
        match free.first() {
            None => false,
            Some(&start) => {
                let dist = self.bfs_distances(start);
                free.iter()
                    .all(|&(r, c)| dist[r * self.tiles_per_side + c] != usize::MAX)
            }
        }
    }

    fn dead_end_count(&self) -> usize {
        self.room_tiles()
            .iter()
            .filter(|&&(r, c)| {
                let open = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)]
                    .iter()
                    .filter(|&&(dr, dc)| !self.is_wall(r as i64 + dr, c as i64 + dc))
                    .count();
                open == 1
            })
            .count()
    }
}
