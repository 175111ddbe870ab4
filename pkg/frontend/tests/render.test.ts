// @vitest-environment jsdom
import { beforeEach, describe, expect, it } from "vitest";

import { renderErrorCard, renderTrajectory, validateItem } from "../src/render";
import type { ItemPayload } from "../src/types";
import { makeTrajectory } from "./fake-server";

function item(revised = false): ItemPayload {
  return {
    item_index: 2,
    presentation: "A presentation narrative.",
    trajectory: makeTrajectory("case-9", revised),
  };
}

describe("item payload validation", () => {
  it("accepts a well-formed payload", () => {
    expect(validateItem(item())).toEqual([]);
  });

  it("flags unknown extra keys", () => {
    const bad = { ...item(), run_id: "leaky" } as unknown;
    expect(validateItem(bad)).toContain("unknown payload key: run_id");
    const trajBad = item() as unknown as { trajectory: Record<string, unknown> };
    trajBad.trajectory = { ...trajBad.trajectory, provenance: "x" };
    expect(validateItem(trajBad)).toContain("unknown trajectory key: provenance");
  });

  it("flags missing keys and wrong types", () => {
    const noY = item() as unknown as { trajectory: Record<string, unknown> };
    delete noY.trajectory.Y;
    expect(validateItem(noY)).toContain("missing trajectory key: Y");
    const badB = item() as unknown as { trajectory: Record<string, unknown> };
    badB.trajectory.B = ["not", "a", "string"];
    expect(validateItem(badB)).toContain("B must be a string");
  });
});

describe("trajectory rendering", () => {
  let root: HTMLElement;

  beforeEach(() => {
    document.body.innerHTML = '<div id="app"></div>';
    root = document.getElementById("app")!;
  });

  it("renders every component section", () => {
    renderTrajectory(root, item(), "Item 3 of 10");
    for (const component of ["D", "R", "W", "B", "Q", "Y"]) {
      expect(root.querySelector(`.component-${component}`)).not.toBeNull();
    }
    expect(root.querySelector(".progress")!.textContent).toBe("Item 3 of 10");
  });

  it("shows differential entries in rank order", () => {
    const payload = item();
    payload.trajectory.R = [...payload.trajectory.R].reverse();
    renderTrajectory(root, payload, "");
    const ranks = Array.from(root.querySelectorAll(".differential-row .rank")).map((td) => td.textContent);
    expect(ranks).toEqual(["1", "2", "3"]);
  });

  it("flags the revision marker with a badge", () => {
    renderTrajectory(root, item(true), "");
    expect(root.querySelector(".revision-badge")).not.toBeNull();
    renderTrajectory(root, item(false), "");
    expect(root.querySelector(".revision-badge")).toBeNull();
  });

  it("error card replaces the whole view on schema mismatch", () => {
    renderTrajectory(root, item(), "");
    renderErrorCard(root, ["unknown payload key: run_id"]);
    expect(root.querySelector(".item-view")).toBeNull();
    expect(root.querySelector(".error-card")).not.toBeNull();
    expect(root.textContent).toContain("unknown payload key: run_id");
  });
});
