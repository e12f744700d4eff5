// Layered DAG layout for the process graph: longest-path layering with
// stable in-layer ordering, enough for desk-scale models.

import type { ModelDoc } from "./types.js";

export interface NodePosition {
  id: string;
  layer: number;
  row: number;
  x: number;
  y: number;
}

export interface LayoutResult {
  positions: Record<string, NodePosition>;
  width: number;
  height: number;
}

export const LAYER_GAP = 170;
export const ROW_GAP = 90;

export function layerByLongestPath(model: ModelDoc): Record<string, number> {
  const incoming = new Map<string, string[]>();
  const outgoing = new Map<string, string[]>();
  for (const el of model.elements) {
    incoming.set(el.id, []);
    outgoing.set(el.id, []);
  }
  for (const flow of model.flows) {
    outgoing.get(flow.source)?.push(flow.target);
    incoming.get(flow.target)?.push(flow.source);
  }

  const layer: Record<string, number> = {};
  const pending = new Map<string, number>();
  const ready: string[] = [];
  for (const el of model.elements) {
    const deg = incoming.get(el.id)?.length ?? 0;
    pending.set(el.id, deg);
    if (deg === 0) {
      ready.push(el.id);
      layer[el.id] = 0;
    }
  }
  while (ready.length) {
    const id = ready.shift()!;
    for (const next of outgoing.get(id) ?? []) {
      layer[next] = Math.max(layer[next] ?? 0, (layer[id] ?? 0) + 1);
      const left = (pending.get(next) ?? 0) - 1;
      pending.set(next, left);
      if (left === 0) {
        ready.push(next);
      }
    }
  }
  return layer;
}

export function layoutModel(model: ModelDoc): LayoutResult {
  const layers = layerByLongestPath(model);
  const rows = new Map<number, number>();
  const positions: Record<string, NodePosition> = {};
  // Document order keeps siblings stable between renders.
  for (const el of model.elements) {
    const layer = layers[el.id] ?? 0;
    const row = rows.get(layer) ?? 0;
    rows.set(layer, row + 1);
    positions[el.id] = {
      id: el.id,
      layer,
      row,
      x: 40 + layer * LAYER_GAP,
      y: 40 + row * ROW_GAP,
    };
  }
  const maxLayer = Math.max(0, ...Object.values(positions).map((p) => p.layer));
  const maxRow = Math.max(0, ...Object.values(positions).map((p) => p.row));
  return {
    positions,
    width: 80 + (maxLayer + 1) * LAYER_GAP,
    height: 80 + (maxRow + 1) * ROW_GAP,
  };
}
