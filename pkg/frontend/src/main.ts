/**
 * Studio wiring: benchmark browser, mask painting, reference toggles,
 * completion runs with history, and benchmark mask saving.
 */

import { ApiClient, ApiRequestError, GroupDetail } from "./api.js";
import { Stroke } from "./mask.js";
import { CanvasSession } from "./session.js";

const api = new ApiClient("");

const el = {
  groups: document.getElementById("groups") as HTMLSelectElement,
  load: document.getElementById("load") as HTMLButtonElement,
  canvas: document.getElementById("paint") as HTMLCanvasElement,
  radius: document.getElementById("radius") as HTMLInputElement,
  erase: document.getElementById("erase") as HTMLInputElement,
  undo: document.getElementById("undo") as HTMLButtonElement,
  clear: document.getElementById("clear") as HTMLButtonElement,
  refs: document.getElementById("refs") as HTMLDivElement,
  prompt: document.getElementById("prompt") as HTMLInputElement,
  seed: document.getElementById("seed") as HTMLInputElement,
  steps: document.getElementById("steps") as HTMLInputElement,
  guidance: document.getElementById("guidance") as HTMLInputElement,
  run: document.getElementById("run") as HTMLButtonElement,
  save: document.getElementById("save-mask") as HTMLButtonElement,
  status: document.getElementById("status") as HTMLDivElement,
  result: document.getElementById("result") as HTMLImageElement,
  sourceView: document.getElementById("source-view") as HTMLImageElement,
  history: document.getElementById("history") as HTMLDivElement,
};

let session: CanvasSession | null = null;
let group: GroupDetail | null = null;
let drawing: Stroke | null = null;
const SCALE = 6; // screen pixels per image pixel

function status(text: string, isError = false): void {
  el.status.textContent = text;
  el.status.className = isError ? "status error" : "status";
}

function describeError(err: unknown): string {
  if (err instanceof ApiRequestError) return `${err.code}: ${err.detail}`;
  return String(err);
}

function redraw(): void {
  if (!session) return;
  const ctx = el.canvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, el.canvas.width, el.canvas.height);
  ctx.drawImage(el.sourceView, 0, 0, el.canvas.width, el.canvas.height);
  const mask = session.rasterize();
  ctx.fillStyle = "rgba(255, 64, 64, 0.55)";
  for (let y = 0; y < session.height; y++) {
    for (let x = 0; x < session.width; x++) {
      if (mask[y * session.width + x]) {
        ctx.fillRect(x * SCALE, y * SCALE, SCALE, SCALE);
      }
    }
  }
}

function canvasPoint(ev: PointerEvent): [number, number] {
  const rect = el.canvas.getBoundingClientRect();
  const x = ((ev.clientX - rect.left) / rect.width) * el.canvas.width / SCALE;
  const y = ((ev.clientY - rect.top) / rect.height) * el.canvas.height / SCALE;
  return [x, y];
}

async function loadGroups(): Promise<void> {
  try {
    const groups = await api.listGroups();
    el.groups.innerHTML = "";
    for (const g of groups) {
      const opt = document.createElement("option");
      opt.value = g.group_id;
      opt.textContent = `${g.group_id} (${g.reference_labels.join(", ")})`;
      el.groups.appendChild(opt);
    }
    status(`${groups.length} benchmark groups`);
  } catch (err) {
    status(describeError(err), true);
  }
}

async function loadGroup(): Promise<void> {
  try {
    group = await api.getGroup(el.groups.value);
    el.sourceView.src = `data:image/png;base64,${group.source}`;
    await el.sourceView.decode();
    const size = el.sourceView.naturalWidth;
    session = new CanvasSession(size, el.sourceView.naturalHeight);
    session.setSource(group.source);
    session.setReferences(group.references.map(
      (r) => ({ label: r.label, image: r.image, mask: r.mask })));
    session.prompt = group.prompt;
    el.prompt.value = group.prompt ?? "";
    el.canvas.width = size * SCALE;
    el.canvas.height = el.sourceView.naturalHeight * SCALE;
    el.refs.innerHTML = "";
    for (const r of group.references) {
      const label = document.createElement("label");
      const box = document.createElement("input");
      box.type = "checkbox";
      box.checked = true;
      box.addEventListener("change", () => {
        session?.toggleReference(r.label, box.checked);
      });
      label.appendChild(box);
      label.appendChild(document.createTextNode(` ${r.label}`));
      const thumb = document.createElement("img");
      thumb.src = `data:image/png;base64,${r.image}`;
      thumb.className = "thumb";
      label.appendChild(thumb);
      el.refs.appendChild(label);
    }
    redraw();
    status(`loaded ${group.group_id}`);
  } catch (err) {
    status(describeError(err), true);
  }
}

el.canvas.addEventListener("pointerdown", (ev) => {
  if (!session) return;
  drawing = {
    points: [canvasPoint(ev)],
    radius: Number(el.radius.value),
    erase: el.erase.checked,
  };
  el.canvas.setPointerCapture(ev.pointerId);
});
el.canvas.addEventListener("pointermove", (ev) => {
  if (!drawing || !session) return;
  drawing.points.push(canvasPoint(ev));
  session.addStroke(drawing);
  redraw();
  session.undoStroke();
});
el.canvas.addEventListener("pointerup", () => {
  if (drawing && session) {
    session.addStroke(drawing);
    drawing = null;
    redraw();
  }
});

el.undo.addEventListener("click", () => {
  session?.undoStroke();
  redraw();
});
el.clear.addEventListener("click", () => {
  session?.clearStrokes();
  redraw();
});

el.run.addEventListener("click", async () => {
  if (!session) return;
  session.seed = Number(el.seed.value);
  session.steps = Number(el.steps.value);
  session.guidance = Number(el.guidance.value);
  session.prompt = el.prompt.value || null;
  el.run.disabled = true;
  status("running completion ...");
  try {
    const result = await session.requestCompletion(api);
    if ("blocked" in result) {
      status(`${result.code}: ${result.message}`, true);
    } else {
      el.result.src = `data:image/png;base64,${result.image}`;
      status(`done in ${result.duration_ms.toFixed(0)} ms `
        + `(seed ${result.seed}, steps ${result.steps}, guidance ${result.guidance})`);
      const entry = document.createElement("img");
      entry.src = el.result.src;
      entry.title = `seed ${result.seed}`;
      entry.className = "thumb";
      el.history.prepend(entry);
      while (el.history.childElementCount > 20) {
        el.history.lastElementChild?.remove();
      }
    }
  } catch (err) {
    status(describeError(err), true);
  } finally {
    el.run.disabled = false;
  }
});

el.save.addEventListener("click", async () => {
  if (!session || !group) return;
  try {
    const res = await session.saveBenchmarkMask(api, group.group_id);
    status(res.warning ? `stored with warning: ${res.warning}` : "mask stored");
  } catch (err) {
    status(describeError(err), true);
  }
});

el.load.addEventListener("click", () => void loadGroup());
void loadGroups();
