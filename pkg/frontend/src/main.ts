/** DOM wiring: renders the controller's view and forwards input to it. */

import {
  AUDIT_CLASSES,
  AuditApi,
  AuditClass,
  CLASS_LABELS,
  NextCrop,
  Report,
} from "./api.js";
import { SessionController, View } from "./controller.js";

const CROP_MARGIN = 24; // context pixels around the box
const KEY_TO_CLASS: Record<string, AuditClass> = {
  "1": "high_quality",
  "2": "low_quality",
  "3": "multiple_persons",
  "4": "not_a_person",
};

const app = document.getElementById("app") as HTMLElement;
const api = new AuditApi();
let controller: SessionController | null = null;
let lastBlobUrl: string | null = null;

function sessionFromHash(): string | null {
  const match = /^#s=(.+)$/.exec(location.hash);
  return match ? decodeURIComponent(match[1]) : null;
}

function el(
  tag: string,
  attrs: Record<string, string> = {},
  text = "",
): HTMLElement {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text) node.textContent = text;
  return node;
}

function renderSetup(message = ""): void {
  app.replaceChildren();
  const panel = el("div", { class: "panel setup" });
  panel.append(el("h1", {}, "Crop review"));
  panel.append(
    el("p", {}, "Start a session to label a random sample of dataset crops."),
  );
  const nInput = el("input", {
    type: "number",
    id: "n",
    value: "1000",
    min: "1",
  }) as HTMLInputElement;
  const seedInput = el("input", {
    type: "number",
    id: "seed",
    value: "0",
  }) as HTMLInputElement;
  const nField = el("label", {}, "Sample size ");
  nField.append(nInput);
  const seedField = el("label", {}, "Seed ");
  seedField.append(seedInput);
  const button = el("button", { class: "primary" }, "Start session");
  button.addEventListener("click", async () => {
    button.setAttribute("disabled", "");
    try {
      const id = await api.createSession(
        parseInt(nInput.value, 10),
        parseInt(seedInput.value, 10),
      );
      location.hash = `s=${encodeURIComponent(id)}`;
      boot(id);
    } catch (err) {
      button.removeAttribute("disabled");
      renderSetup(err instanceof Error ? err.message : String(err));
    }
  });
  panel.append(nField, seedField, button);
  if (message) panel.append(el("p", { class: "error-text" }, message));
  app.append(panel);
}

function renderTallies(report: Report | null): HTMLElement {
  const pane = el("div", { class: "panel tallies" });
  pane.append(el("h2", {}, "Running tallies"));
  if (report === null) {
    pane.append(el("p", { class: "muted" }, "No labels yet."));
    return pane;
  }
  const table = el("table");
  const head = el("tr");
  head.append(el("th", {}, "Class"), el("th", {}, "Count"), el("th", {}, "%"));
  table.append(head);
  for (const cls of AUDIT_CLASSES) {
    const row = el("tr");
    row.append(
      el("td", {}, CLASS_LABELS[cls]),
      el("td", { class: "num" }, String(report.counts[cls])),
      el("td", { class: "num" }, report.percentages[cls].toFixed(1)),
    );
    table.append(row);
  }
  pane.append(table);
  pane.append(
    el(
      "p",
      {},
      `Person rate ${report.person_rate.toFixed(1)}% over ${report.n_labeled} labeled`,
    ),
  );
  return pane;
}

async function renderCrop(container: HTMLElement, crop: NextCrop): Promise<void> {
  if (lastBlobUrl !== null) {
    URL.revokeObjectURL(lastBlobUrl);
    lastBlobUrl = null;
  }
  const frame = el("div", { class: "crop-frame" });
  container.append(frame);
  try {
    const { blobUrl, box } = await api.fetchCrop(crop.box_id, CROP_MARGIN);
    lastBlobUrl = blobUrl;
    const img = el("img", { src: blobUrl, alt: crop.box_id }) as HTMLImageElement;
    frame.append(img);
    img.addEventListener("load", () => {
      if (box === null || img.naturalWidth === 0) return;
      const sx = img.clientWidth / img.naturalWidth;
      const sy = img.clientHeight / img.naturalHeight;
      const overlay = el("div", { class: "box-overlay" });
      overlay.style.left = `${box[0] * sx}px`;
      overlay.style.top = `${box[1] * sy}px`;
      overlay.style.width = `${box[2] * sx}px`;
      overlay.style.height = `${box[3] * sy}px`;
      frame.append(overlay);
    });
  } catch {
    frame.append(el("p", { class: "error-text" }, "crop image failed to load"));
  }
}

function render(view: View): void {
  app.replaceChildren();

  if (view.phase === "loading") {
    app.append(el("div", { class: "panel" }, "Loading session..."));
    return;
  }

  if (view.phase === "error") {
    const banner = el("div", { class: "panel error-banner" });
    banner.append(el("p", {}, `Request failed: ${view.error ?? "unknown error"}`));
    banner.append(
      el("p", { class: "muted" }, "Nothing was lost; retry resends it."),
    );
    const retry = el("button", { class: "primary" }, "Retry");
    retry.addEventListener("click", () => controller?.retry());
    banner.append(retry);
    app.append(banner);
    return;
  }

  if (view.phase === "done") {
    const panel = el("div", { class: "panel" });
    panel.append(el("h1", {}, "Session complete"));
    panel.append(el("p", {}, "Every sampled crop has a label."));
    app.append(panel, renderTallies(view.report));
    return;
  }

  // labeling
  const crop = view.crop as NextCrop;
  const main = el("div", { class: "panel" });
  const status = view.relabeling
    ? "Relabeling the previous crop"
    : `${crop.remaining} crops remaining`;
  main.append(el("p", { class: "status" }, status));
  renderCrop(main, crop);

  const buttons = el("div", { class: "choices" });
  AUDIT_CLASSES.forEach((cls, i) => {
    const btn = el("button", { class: "choice" });
    btn.append(el("span", { class: "key" }, String(i + 1)));
    btn.append(el("span", {}, CLASS_LABELS[cls]));
    btn.addEventListener("click", () => controller?.label(cls));
    buttons.append(btn);
  });
  main.append(buttons);

  if (view.canUndo) {
    const undo = el("button", { class: "undo" }, "U - relabel previous");
    undo.addEventListener("click", () => controller?.undo());
    main.append(undo);
  }
  app.append(main, renderTallies(view.report));
}

function boot(sessionId: string): void {
  controller = new SessionController(api, sessionId, render);
  controller.start();
}

document.addEventListener("keydown", (event) => {
  if (controller === null) return;
  if (event.target instanceof HTMLInputElement) return;
  const cls = KEY_TO_CLASS[event.key];
  if (cls !== undefined) controller.label(cls);
  else if (event.key === "u" || event.key === "U") controller.undo();
});

window.addEventListener("hashchange", () => {
  const id = sessionFromHash();
  if (id !== null) boot(id);
  else renderSetup();
});

const initial = sessionFromHash();
if (initial !== null) boot(initial);
else renderSetup();
