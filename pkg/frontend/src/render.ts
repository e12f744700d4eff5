// DOM rendering. This layer only draws ViewState; nothing here computes
// engine facts.

import { layoutModel } from "./layout.js";
import type { ViewState } from "./state.js";
import { verdictDisplay } from "./state.js";
import type { ModelDoc, RegionRow } from "./types.js";

const SVG_NS = "http://www.w3.org/2000/svg";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

export function renderBanner(target: HTMLElement, view: ViewState): void {
  target.textContent = view.banner.text;
  target.className = `banner banner-${view.banner.tone}${view.connectionLost ? " banner-lost" : ""}`;
}

export function renderGraph(target: HTMLElement, model: ModelDoc, view: ViewState): void {
  const layout = layoutModel(model);
  const svg = document.createElementNS(SVG_NS, "svg");
  svg.setAttribute("width", String(layout.width));
  svg.setAttribute("height", String(layout.height));

  for (const flow of model.flows) {
    const from = layout.positions[flow.source];
    const to = layout.positions[flow.target];
    if (!from || !to) {
      continue;
    }
    const line = document.createElementNS(SVG_NS, "line");
    line.setAttribute("x1", String(from.x + 60));
    line.setAttribute("y1", String(from.y + 20));
    line.setAttribute("x2", String(to.x));
    line.setAttribute("y2", String(to.y + 20));
    line.setAttribute("class", "flow");
    svg.appendChild(line);
  }
  for (const element of model.elements) {
    const pos = layout.positions[element.id];
    if (!pos) {
      continue;
    }
    const group = document.createElementNS(SVG_NS, "g");
    const status = view.nodes[element.id] ?? "Idle";
    const failing = view.failingTask === element.id;
    const rect = document.createElementNS(SVG_NS, "rect");
    rect.setAttribute("x", String(pos.x));
    rect.setAttribute("y", String(pos.y));
    rect.setAttribute("width", "60");
    rect.setAttribute("height", "40");
    rect.setAttribute("rx", element.kind.endsWith("Gateway") ? "20" : "6");
    rect.setAttribute(
      "class",
      `node node-${status.toLowerCase()}${failing ? " node-failing" : ""}`,
    );
    const label = document.createElementNS(SVG_NS, "text");
    label.setAttribute("x", String(pos.x + 30));
    label.setAttribute("y", String(pos.y + 55));
    label.setAttribute("text-anchor", "middle");
    label.textContent = element.name || element.id;
    group.appendChild(rect);
    group.appendChild(label);
    group.appendChild(title(element, status));
    svg.appendChild(group);
  }
  target.replaceChildren(svg);
}

function title(element: { id: string; kind: string }, status: string) {
  const node = document.createElementNS(SVG_NS, "title");
  node.textContent = `${element.id} (${element.kind}): ${status}`;
  return node;
}

export function renderRegions(
  target: HTMLElement,
  regions: RegionRow[],
  view: ViewState,
): void {
  const selectedBy = new Map<string, string>();
  for (const selection of view.selections) {
    selectedBy.set([...selection.members].sort().join("|"), selection.name);
  }
  const list = el("ul", "regions");
  for (const region of regions) {
    const key = [...region.members].sort().join("|");
    const item = el("li");
    item.appendChild(el("span", "region-id", region.regionId));
    item.appendChild(
      el("span", "region-span", ` ${region.entry} → ${region.exit} (${region.size})`),
    );
    const name = selectedBy.get(key);
    if (name) {
      item.appendChild(el("span", "badge badge-selected", name));
    }
    list.appendChild(item);
  }
  target.replaceChildren(list);
}

export function renderTxTree(target: HTMLElement, view: ViewState): void {
  const byParent = new Map<string | null, ViewState["txs"]>();
  for (const tx of view.txs) {
    const bucket = byParent.get(tx.parent) ?? [];
    bucket.push(tx);
    byParent.set(tx.parent, bucket);
  }
  const build = (parent: string | null): HTMLUListElement => {
    const list = el("ul", "txs");
    for (const tx of byParent.get(parent) ?? []) {
      const item = el("li");
      item.appendChild(el("span", `tx-status tx-${tx.status.toLowerCase()}`, tx.status));
      item.appendChild(
        el("span", "tx-name", ` ${tx.txId} v${tx.version} [${tx.participants.join(", ")}]`),
      );
      const children = build(tx.txId);
      if (children.childElementCount > 0) {
        item.appendChild(children);
      }
      list.appendChild(item);
    }
    return list;
  };
  target.replaceChildren(build(null));
}

export function renderFeed(target: HTMLElement, view: ViewState): void {
  const list = el("ol", "feed");
  for (const entry of view.feed.slice(-200)) {
    const { seq, kind, ...rest } = entry;
    list.appendChild(el("li", `feed-${kind}`, `#${seq} ${kind} ${JSON.stringify(rest)}`));
  }
  if (view.feedGap) {
    list.appendChild(
      el("li", "feed-gap",
         `gap: expected seq ${view.feedGap.expected}, saw ${view.feedGap.got}`),
    );
  }
  target.replaceChildren(list);
  target.scrollTop = target.scrollHeight;
}

export function renderRepairPanel(target: HTMLElement, view: ViewState): void {
  const panel = el("div", "repair");
  if (view.mode !== "awaiting-repair" && !view.verdict) {
    panel.appendChild(el("p", "muted", "No failure awaiting repair."));
    target.replaceChildren(panel);
    return;
  }
  if (view.ticket) {
    const ticket = view.ticket;
    panel.appendChild(el("h3", undefined, `Ticket ${ticket.ticketId}: ${ticket.logicalName}`));
    panel.appendChild(
      el("p", undefined, `cause: ${ticket.cause.taskId} — ${ticket.cause.message}`),
    );
    panel.appendChild(el("p", undefined, `in: ${ticket.in.join(", ") || "(none)"}`));
    panel.appendChild(
      el("p", undefined, `requiredOut: ${ticket.requiredOut.join(", ") || "(none)"}`),
    );
  }
  if (view.verdict) {
    const verdict = view.verdict;
    const badge = el("p", `verdict verdict-${verdict.verdict}`);
    // Displayed verbatim: this string is the server's verdict field.
    badge.textContent = verdictDisplay(verdict);
    panel.appendChild(badge);
    if (verdict.target) {
      panel.appendChild(el("p", undefined, `escalation target: ${verdict.target}`));
    }
    for (const reason of verdict.reasons) {
      panel.appendChild(
        el(
          "p",
          "verdict-reason",
          `${reason.check}: ${reason.detail}` +
            (reason.offendingVars.length
              ? ` [${reason.offendingVars.join(", ")}]`
              : ""),
        ),
      );
    }
  }
  target.replaceChildren(panel);
}

export function renderMetrics(
  target: HTMLElement,
  metrics: { messages2pc: Record<string, number>; taskAttempts: Record<string, number>; steps: number },
): void {
  const panel = el("div", "metrics");
  panel.appendChild(el("p", undefined, `steps: ${metrics.steps}`));
  const msgs = Object.entries(metrics.messages2pc)
    .map(([tx, n]) => `${tx}=${n}`)
    .join(", ");
  panel.appendChild(el("p", undefined, `2pc messages: ${msgs || "(none)"}`));
  const attempts = Object.entries(metrics.taskAttempts)
    .map(([task, n]) => `${task}=${n}`)
    .join(", ");
  panel.appendChild(el("p", undefined, `task attempts: ${attempts || "(none)"}`));
  target.replaceChildren(panel);
}
